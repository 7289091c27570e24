//! Quaternion algebra and quaternion linear layers.
//!
//! A quaternion `q = r + xi + yj + zk` multiplies by the Hamilton product,
//! which is equivalent to a structured 4x4 real matrix acting on the
//! component vector. The quaternion layers below lift that structure to
//! feature blocks: the input is four `[batch, d]` blocks, the weight is four
//! real matrices, and the layer computes `act(W (x) Q)` with every scalar
//! product in the Hamilton expansion realized as a matrix product.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, TensorId};

/// Scalar quaternion on basis (1, i, j, k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { r, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn as_vec(&self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }
}

/// Hamilton product of two quaternions, expanded term by term.
pub fn hamilton_product(a: &Quaternion, b: &Quaternion) -> Quaternion {
    Quaternion {
        r: a.r * b.r - a.x * b.x - a.y * b.y - a.z * b.z,
        x: a.r * b.x + a.x * b.r + a.y * b.z - a.z * b.y,
        y: a.r * b.y - a.x * b.z + a.y * b.r + a.z * b.x,
        z: a.r * b.z + a.x * b.y - a.y * b.x + a.z * b.r,
    }
}

/// The 4x4 real matrix `M(q)` with `M(q) * vec(p) = vec(q (x) p)`; first
/// column is `(r, x, y, z)^T`.
pub fn quaternion_to_matrix(q: &Quaternion) -> [[f64; 4]; 4] {
    [
        [q.r, -q.x, -q.y, -q.z],
        [q.x, q.r, -q.z, q.y],
        [q.y, q.z, q.r, -q.x],
        [q.z, -q.y, q.x, q.r],
    ]
}

/// Quaternion-valued feature batch at the value level: four equal-shape
/// `[batch, width]` component blocks (r, i, j, k).
#[derive(Debug, Clone)]
pub struct QuatFeature {
    pub batch: usize,
    pub width: usize,
    pub blocks: [Vec<f64>; 4],
}

impl QuatFeature {
    pub fn zeros(batch: usize, width: usize) -> Self {
        let n = batch * width;
        QuatFeature {
            batch,
            width,
            blocks: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }
}

/// Elementwise Hamilton product over a pair of feature batches.
pub fn hamilton_product_feature(a: &QuatFeature, b: &QuatFeature) -> Result<QuatFeature> {
    if a.batch != b.batch || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op: "hamilton_product_feature",
            lhs: vec![a.batch, a.width],
            rhs: vec![b.batch, b.width],
        });
    }
    let mut out = QuatFeature::zeros(a.batch, a.width);
    for i in 0..a.batch * a.width {
        let qa = Quaternion::new(
            a.blocks[0][i],
            a.blocks[1][i],
            a.blocks[2][i],
            a.blocks[3][i],
        );
        let qb = Quaternion::new(
            b.blocks[0][i],
            b.blocks[1][i],
            b.blocks[2][i],
            b.blocks[3][i],
        );
        let q = hamilton_product(&qa, &qb);
        out.blocks[0][i] = q.r;
        out.blocks[1][i] = q.x;
        out.blocks[2][i] = q.y;
        out.blocks[3][i] = q.z;
    }
    Ok(out)
}

/// Assignment of the two real inputs `a`, `b` and two zero blocks to the four
/// quaternion component slots. The six named arrangements from the input
/// pattern study are expressible, `[a,b,*,*]` being the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SlotPattern {
    pub a_slot: usize,
    pub b_slot: usize,
}

impl SlotPattern {
    pub const AB_DEFAULT: SlotPattern = SlotPattern {
        a_slot: 0,
        b_slot: 1,
    };

    pub fn new(a_slot: usize, b_slot: usize) -> Result<Self> {
        if a_slot > 3 || b_slot > 3 || a_slot == b_slot {
            return Err(Error::Config(format!(
                "slot pattern needs two distinct slots in 0..4, got a={a_slot} b={b_slot}"
            )));
        }
        Ok(SlotPattern { a_slot, b_slot })
    }

    /// All six arrangements with `a` before `b`.
    pub fn named_patterns() -> [SlotPattern; 6] {
        [
            SlotPattern {
                a_slot: 0,
                b_slot: 1,
            }, // [a,b,*,*]
            SlotPattern {
                a_slot: 2,
                b_slot: 3,
            }, // [*,*,a,b]
            SlotPattern {
                a_slot: 0,
                b_slot: 3,
            }, // [a,*,*,b]
            SlotPattern {
                a_slot: 0,
                b_slot: 2,
            }, // [a,*,b,*]
            SlotPattern {
                a_slot: 1,
                b_slot: 3,
            }, // [*,a,*,b]
            SlotPattern {
                a_slot: 1,
                b_slot: 2,
            }, // [*,a,b,*]
        ]
    }
}

impl Default for SlotPattern {
    fn default() -> Self {
        Self::AB_DEFAULT
    }
}

impl fmt::Display for SlotPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut slots = ["*"; 4];
        slots[self.a_slot] = "a";
        slots[self.b_slot] = "b";
        write!(f, "[{},{},{},{}]", slots[0], slots[1], slots[2], slots[3])
    }
}

impl FromStr for SlotPattern {
    type Err = Error;

    /// Accepts `ab**` or `[a,b,*,*]` style strings.
    fn from_str(s: &str) -> Result<Self> {
        let cleaned: String = s.chars().filter(|c| matches!(c, 'a' | 'b' | '*')).collect();
        if cleaned.len() != 4 {
            return Err(Error::Config(format!("unrecognized slot pattern `{s}`")));
        }
        let a_slot = cleaned.find('a');
        let b_slot = cleaned.find('b');
        match (a_slot, b_slot) {
            (Some(a), Some(b))
                if cleaned.matches('a').count() == 1 && cleaned.matches('b').count() == 1 =>
            {
                SlotPattern::new(a, b)
            }
            _ => Err(Error::Config(format!("unrecognized slot pattern `{s}`"))),
        }
    }
}

/// Tape-level quaternion feature: four component nodes of equal shape.
#[derive(Debug, Clone, Copy)]
pub struct QuatNodes {
    pub blocks: [TensorId; 4],
}

/// Place `a` and `b` into their pattern slots; the other two slots are zero
/// tensors of the same shape.
pub fn pack_slots(
    tape: &mut Tape,
    a: TensorId,
    b: TensorId,
    pattern: SlotPattern,
) -> Result<QuatNodes> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op: "pack_slots",
            lhs: sa,
            rhs: sb,
        });
    }
    let n: usize = sa.iter().product();
    let mut blocks = [a; 4];
    for (slot, block) in blocks.iter_mut().enumerate() {
        *block = if slot == pattern.a_slot {
            a
        } else if slot == pattern.b_slot {
            b
        } else {
            tape.constant(vec![0.0; n], sa.clone())
        };
    }
    Ok(QuatNodes { blocks })
}

/// Componentwise activation applied to a quaternion layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QuatAct {
    Relu,
    Identity,
}

/// Quaternion linear layer backed by four named weight blocks
/// `{prefix}.wr/.wx/.wy/.wz`, each `[d_in, d_out]` row-major so features
/// apply as `block @ w`.
#[derive(Debug, Clone)]
pub struct QuatLinear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub act: QuatAct,
}

impl QuatLinear {
    pub const BLOCK_NAMES: [&'static str; 4] = ["wr", "wx", "wy", "wz"];

    /// Register the four weight blocks with small uniform init scaled by
    /// `1/sqrt(4 * d_in)`, keeping initial Hamilton products O(1).
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, init: &Stream) {
        let bound = 1.0 / (4.0 * d_in as f64).sqrt();
        for b in Self::BLOCK_NAMES {
            store.insert_uniform(&format!("{prefix}.{b}"), vec![d_in, d_out], bound, init);
        }
    }

    /// Identity weights: `wr = I`, imaginary blocks zero. Square layers only.
    pub fn init_identity(store: &mut ParamStore, prefix: &str, d: usize) {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        store.insert(&format!("{prefix}.wr"), vec![d, d], eye);
        for b in &Self::BLOCK_NAMES[1..] {
            store.insert_zeros(&format!("{prefix}.{b}"), vec![d, d]);
        }
    }

    pub fn new(prefix: &str, d_in: usize, d_out: usize, act: QuatAct) -> Self {
        QuatLinear {
            prefix: prefix.to_string(),
            d_in,
            d_out,
            act,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        Self::BLOCK_NAMES
            .iter()
            .map(|b| format!("{}.{b}", self.prefix))
            .collect()
    }

    /// `act(W (x) Q)`: the Hamilton expansion with each term a matmul, then
    /// the activation applied per component block.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        q: &QuatNodes,
    ) -> Result<QuatNodes> {
        let qw = tape.shape(q.blocks[0]).to_vec();
        if qw.len() != 2 || qw[1] != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "quat_linear_forward",
                lhs: qw,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w: Vec<TensorId> = Self::BLOCK_NAMES
            .iter()
            .map(|b| binder.bind(tape, &format!("{}.{b}", self.prefix)))
            .collect::<Result<_>>()?;
        let (wr, wx, wy, wz) = (w[0], w[1], w[2], w[3]);
        let (qr, qx, qy, qz) = (q.blocks[0], q.blocks[1], q.blocks[2], q.blocks[3]);

        // out_r = qr Wr - qx Wx - qy Wy - qz Wz
        // out_x = qr Wx + qx Wr + qz Wy - qy Wz
        // out_y = qr Wy + qy Wr + qx Wz - qz Wx
        // out_z = qr Wz + qz Wr + qy Wx - qx Wy
        let term = |tape: &mut Tape, a: TensorId, b: TensorId| tape.matmul(a, b);
        let mut out = [qr; 4];
        {
            let t0 = term(tape, qr, wr)?;
            let t1 = term(tape, qx, wx)?;
            let t2 = term(tape, qy, wy)?;
            let t3 = term(tape, qz, wz)?;
            let s = tape.sub(t0, t1)?;
            let s = tape.sub(s, t2)?;
            out[0] = tape.sub(s, t3)?;
        }
        {
            let t0 = term(tape, qr, wx)?;
            let t1 = term(tape, qx, wr)?;
            let t2 = term(tape, qz, wy)?;
            let t3 = term(tape, qy, wz)?;
            let s = tape.add(t0, t1)?;
            let s = tape.add(s, t2)?;
            out[1] = tape.sub(s, t3)?;
        }
        {
            let t0 = term(tape, qr, wy)?;
            let t1 = term(tape, qy, wr)?;
            let t2 = term(tape, qx, wz)?;
            let t3 = term(tape, qz, wx)?;
            let s = tape.add(t0, t1)?;
            let s = tape.add(s, t2)?;
            out[2] = tape.sub(s, t3)?;
        }
        {
            let t0 = term(tape, qr, wz)?;
            let t1 = term(tape, qz, wr)?;
            let t2 = term(tape, qy, wx)?;
            let t3 = term(tape, qx, wy)?;
            let s = tape.add(t0, t1)?;
            let s = tape.add(s, t2)?;
            out[3] = tape.sub(s, t3)?;
        }
        if self.act == QuatAct::Relu {
            for o in out.iter_mut() {
                *o = tape.relu(*o);
            }
        }
        Ok(QuatNodes { blocks: out })
    }
}

/// The real-valued output of a quaternion prompt layer is its r component.
pub fn extract_context(q: &QuatNodes) -> TensorId {
    q.blocks[0]
}

/// Max absolute error between `q1 (x) q2` and the matrix route
/// `M(q1) * vec(q2)` over `n` random pairs.
pub fn hamilton_matrix_oracle(n: usize, seed: u64) -> f64 {
    let mut s = Stream::new("oracle-hamilton", seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let a = Quaternion::new(s.normal(), s.normal(), s.normal(), s.normal());
        let b = Quaternion::new(s.normal(), s.normal(), s.normal(), s.normal());
        let direct = hamilton_product(&a, &b).as_vec();
        let m = quaternion_to_matrix(&a);
        let bv = b.as_vec();
        for i in 0..4 {
            let via: f64 = (0..4).map(|j| m[i][j] * bv[j]).sum();
            worst = worst.max((via - direct[i]).abs());
        }
    }
    worst
}

/// Max errors of `M(q1)M(q2) = M(q1 (x) q2)` and `|q1 (x) q2| = |q1||q2|`
/// over `n` random pairs.
pub fn homomorphism_norm_oracle(n: usize, seed: u64) -> (f64, f64) {
    let mut s = Stream::new("oracle-homomorphism", seed);
    let mut worst_hom = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..n {
        let a = Quaternion::new(s.normal(), s.normal(), s.normal(), s.normal());
        let b = Quaternion::new(s.normal(), s.normal(), s.normal(), s.normal());
        let ma = quaternion_to_matrix(&a);
        let mb = quaternion_to_matrix(&b);
        let mab = quaternion_to_matrix(&hamilton_product(&a, &b));
        for i in 0..4 {
            for j in 0..4 {
                let prod: f64 = (0..4).map(|t| ma[i][t] * mb[t][j]).sum();
                worst_hom = worst_hom.max((prod - mab[i][j]).abs());
            }
        }
        let nprod = hamilton_product(&a, &b).norm();
        worst_norm = worst_norm.max((nprod - a.norm() * b.norm()).abs());
    }
    (worst_hom, worst_norm)
}
