//! Toy dual encoder (vision + text), the frozen domain encoder that stands in
//! for a domain foundation model, and the trainable domain projection.
//!
//! All towers share one pre-norm transformer block implementation and keep
//! their weights in a [`ParamStore`] under fixed prefixes: `base.v.*`,
//! `base.t.*`, `dom.*`, `proj_d.*`. Whether a weight trains is decided by the
//! binder's trainable set, so freezing is a property of the pass, not of the
//! storage.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::params::{Binder, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// Width/depth settings shared by every tower.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Shared embedding width.
    pub d: usize,
    /// Transformer blocks per tower.
    pub m: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Image side length; images are `img x img` grayscale grids.
    pub img: usize,
    pub patch: usize,
    /// Domain-encoder feature width.
    pub d_dom: usize,
    pub vocab: usize,
    /// Positional table length for the text tower.
    pub max_text_len: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            d: 64,
            m: 4,
            heads: 2,
            mlp_hidden: 128,
            img: 32,
            patch: 8,
            d_dom: 64,
            vocab: 64,
            max_text_len: 16,
        }
    }
}

impl EncoderDims {
    pub fn num_patches(&self) -> usize {
        (self.img / self.patch) * (self.img / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if !self.img.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch {}",
                self.img, self.patch
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// One stack of pre-norm transformer blocks under a name prefix.
#[derive(Debug, Clone)]
pub struct Tower {
    pub prefix: String,
    pub d: usize,
    pub m: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Tower {
    pub fn new(prefix: &str, dims: &EncoderDims, d: usize) -> Self {
        Tower {
            prefix: prefix.to_string(),
            d,
            m: dims.m,
            heads: dims.heads,
            hidden: dims.mlp_hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Stream) {
        let d = self.d;
        let wb = 1.0 / (d as f64).sqrt();
        let hb = 1.0 / (self.hidden as f64).sqrt();
        for i in 0..self.m {
            let p = format!("{}.blk{i}", self.prefix);
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert_uniform(&format!("{p}.attn.{w}"), vec![d, d], wb, init);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert_zeros(&format!("{p}.attn.{b}"), vec![d]);
            }
            store.insert(&format!("{p}.ln1.g"), vec![d], vec![1.0; d]);
            store.insert_zeros(&format!("{p}.ln1.b"), vec![d]);
            store.insert(&format!("{p}.ln2.g"), vec![d], vec![1.0; d]);
            store.insert_zeros(&format!("{p}.ln2.b"), vec![d]);
            store.insert_uniform(&format!("{p}.mlp.w1"), vec![d, self.hidden], wb, init);
            store.insert_zeros(&format!("{p}.mlp.b1"), vec![self.hidden]);
            store.insert_uniform(&format!("{p}.mlp.w2"), vec![self.hidden, d], hb, init);
            store.insert_zeros(&format!("{p}.mlp.b2"), vec![d]);
        }
        store.insert(&format!("{}.lnf.g", self.prefix), vec![d], vec![1.0; d]);
        store.insert_zeros(&format!("{}.lnf.b", self.prefix), vec![d]);
    }

    fn attention(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        blk: &str,
        x: TensorId,
    ) -> Result<TensorId> {
        let d = self.d;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut proj = |tape: &mut Tape, w: &str, b: &str| -> Result<TensorId> {
            let wid = binder.bind(tape, &format!("{blk}.attn.{w}"))?;
            let bid = binder.bind(tape, &format!("{blk}.attn.{b}"))?;
            let y = tape.matmul(x, wid)?;
            tape.add_bcast(y, bid)
        };
        let q = proj(tape, "wq", "bq")?;
        let k = proj(tape, "wk", "bk")?;
        let v = proj(tape, "wv", "bv")?;
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores)?;
            heads_out.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads_out)?;
        let wo = binder.bind(tape, &format!("{blk}.attn.wo"))?;
        let bo = binder.bind(tape, &format!("{blk}.attn.bo"))?;
        let y = tape.matmul(cat, wo)?;
        tape.add_bcast(y, bo)
    }

    /// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn block(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        i: usize,
        x: TensorId,
    ) -> Result<TensorId> {
        let blk = format!("{}.blk{i}", self.prefix);
        let g1 = binder.bind(tape, &format!("{blk}.ln1.g"))?;
        let b1 = binder.bind(tape, &format!("{blk}.ln1.b"))?;
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let a = self.attention(tape, binder, &blk, h)?;
        let x = tape.add(x, a)?;

        let g2 = binder.bind(tape, &format!("{blk}.ln2.g"))?;
        let b2 = binder.bind(tape, &format!("{blk}.ln2.b"))?;
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let w1 = binder.bind(tape, &format!("{blk}.mlp.w1"))?;
        let bb1 = binder.bind(tape, &format!("{blk}.mlp.b1"))?;
        let w2 = binder.bind(tape, &format!("{blk}.mlp.w2"))?;
        let bb2 = binder.bind(tape, &format!("{blk}.mlp.b2"))?;
        let hh = tape.matmul(h, w1)?;
        let hh = tape.add_bcast(hh, bb1)?;
        let hh = tape.gelu(hh);
        let hh = tape.matmul(hh, w2)?;
        let mlp = tape.add_bcast(hh, bb2)?;
        tape.add(x, mlp)
    }

    pub fn final_norm(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
    ) -> Result<TensorId> {
        let g = binder.bind(tape, &format!("{}.lnf.g", self.prefix))?;
        let b = binder.bind(tape, &format!("{}.lnf.b", self.prefix))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Split a grayscale image into row-major flattened patches,
/// `[num_patches, patch_dim]`.
pub fn patchify(image: &Image, img: usize, patch: usize) -> Result<Vec<f64>> {
    if !img.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image side {img} not divisible by patch {patch}"
        )));
    }
    if image.pixels.len() != img * img {
        return Err(Error::Config(format!(
            "image has {} pixels, expected {}",
            image.pixels.len(),
            img * img
        )));
    }
    let per_side = img / patch;
    let mut out = Vec::with_capacity(img * img);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for r in 0..patch {
                for c in 0..patch {
                    out.push(image.pixels[(pr * patch + r) * img + pc * patch + c]);
                }
            }
        }
    }
    Ok(out)
}

/// The vision half of the dual encoder (prefix `base.v`).
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub dims: EncoderDims,
    pub tower: Tower,
}

impl VisionEncoder {
    pub fn new(dims: EncoderDims) -> Self {
        let tower = Tower::new("base.v", &dims, dims.d);
        VisionEncoder { dims, tower }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Stream) {
        let d = self.dims.d;
        let pd = self.dims.patch_dim();
        store.insert_uniform(
            "base.v.patch.w",
            vec![pd, d],
            1.0 / (pd as f64).sqrt(),
            init,
        );
        store.insert_zeros("base.v.patch.b", vec![d]);
        store.insert_uniform("base.v.cls", vec![1, d], 0.1, init);
        store.insert_uniform(
            "base.v.pos",
            vec![1 + self.dims.num_patches(), d],
            0.1,
            init,
        );
        self.tower.init(store, init);
        store.insert_uniform("base.v.proj", vec![d, d], 1.0 / (d as f64).sqrt(), init);
    }

    /// Patch embeddings and class token for one image, positional embeddings
    /// included: `(E_1 [num_patches, d], c_1 [1, d])`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Image,
    ) -> Result<(TensorId, TensorId)> {
        let np = self.dims.num_patches();
        let pd = self.dims.patch_dim();
        let raw = patchify(image, self.dims.img, self.dims.patch)?;
        let patches = tape.constant(raw, vec![np, pd]);
        let w = binder.bind(tape, "base.v.patch.w")?;
        let b = binder.bind(tape, "base.v.patch.b")?;
        let emb = tape.matmul(patches, w)?;
        let emb = tape.add_bcast(emb, b)?;
        let pos = binder.bind(tape, "base.v.pos")?;
        let patch_pos = tape.slice_rows(pos, 1, np)?;
        let emb = tape.add(emb, patch_pos)?;
        let cls = binder.bind(tape, "base.v.cls")?;
        let cls_pos = tape.slice_rows(pos, 0, 1)?;
        let cls = tape.add(cls, cls_pos)?;
        Ok((emb, cls))
    }

    /// Unprompted forward: final class token, layer-normed and projected to
    /// the shared space, `[1, d]`.
    pub fn forward_plain(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Image,
    ) -> Result<TensorId> {
        let (emb, cls) = self.embed(tape, binder, image)?;
        let mut x = tape.concat_rows(&[cls, emb])?;
        for i in 0..self.dims.m {
            x = self.tower.block(tape, binder, i, x)?;
        }
        let x = self.tower.final_norm(tape, binder, x)?;
        let cls_out = tape.slice_rows(x, 0, 1)?;
        let proj = binder.bind(tape, "base.v.proj")?;
        tape.matmul(cls_out, proj)
    }
}

/// The text half of the dual encoder (prefix `base.t`). Sequences are laid
/// out as `[ctx0, ctx1, category tokens...]`: context slots always precede
/// category tokens, so prompted and plain passes share positional geometry.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub dims: EncoderDims,
    pub tower: Tower,
}

impl TextEncoder {
    pub fn new(dims: EncoderDims) -> Self {
        let tower = Tower::new("base.t", &dims, dims.d);
        TextEncoder { dims, tower }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Stream) {
        let d = self.dims.d;
        store.insert_uniform("base.t.tok", vec![self.dims.vocab, d], 0.25, init);
        store.insert_uniform("base.t.pos", vec![self.dims.max_text_len, d], 0.1, init);
        self.tower.init(store, init);
        store.insert_uniform("base.t.proj", vec![d, d], 1.0 / (d as f64).sqrt(), init);
    }

    /// Raw token embeddings, no positional rows.
    pub fn embed_tokens_raw(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
    ) -> Result<TensorId> {
        if tokens.iter().any(|&t| t >= self.dims.vocab) {
            return Err(Error::Config(format!(
                "token out of vocabulary range {}",
                self.dims.vocab
            )));
        }
        if tokens.len() > self.dims.max_text_len {
            return Err(Error::Config(format!(
                "sequence of {} tokens exceeds max text length {}",
                tokens.len(),
                self.dims.max_text_len
            )));
        }
        let tok = binder.bind(tape, "base.t.tok")?;
        let rows: Vec<TensorId> = tokens
            .iter()
            .map(|&t| tape.slice_rows(tok, t, 1))
            .collect::<Result<_>>()?;
        tape.concat_rows(&rows)
    }

    /// Add the positional rows `0..len` to an assembled embedding sequence;
    /// happens once at the encoder input, whether the leading positions hold
    /// placeholder tokens or generated context.
    pub fn add_positions(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        seq: TensorId,
    ) -> Result<TensorId> {
        let len = tape.shape(seq)[0];
        if len > self.dims.max_text_len {
            return Err(Error::Config(format!(
                "sequence of {len} tokens exceeds max text length {}",
                self.dims.max_text_len
            )));
        }
        let pos = binder.bind(tape, "base.t.pos")?;
        let pos_rows = tape.slice_rows(pos, 0, len)?;
        tape.add(seq, pos_rows)
    }

    /// Run the blocks over an already-assembled embedding sequence and pool
    /// the last position.
    pub fn forward_embedded(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        seq: TensorId,
    ) -> Result<TensorId> {
        let mut x = seq;
        for i in 0..self.dims.m {
            x = self.tower.block(tape, binder, i, x)?;
        }
        self.pool(tape, binder, x, None)
    }

    /// Final layer norm, then the pooled position (defaults to the last row),
    /// projected: the sentence embedding `[1, d]`.
    pub fn pool(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorId,
        position: Option<usize>,
    ) -> Result<TensorId> {
        let x = self.tower.final_norm(tape, binder, x)?;
        let rows = tape.shape(x)[0];
        let pos = position.unwrap_or(rows - 1);
        let last = tape.slice_rows(x, pos, 1)?;
        let proj = binder.bind(tape, "base.t.proj")?;
        tape.matmul(last, proj)
    }

    pub fn forward_plain(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        tokens: &[usize],
    ) -> Result<TensorId> {
        let raw = self.embed_tokens_raw(tape, binder, tokens)?;
        let seq = self.add_positions(tape, binder, raw)?;
        self.forward_embedded(tape, binder, seq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainProvenance {
    SeededRandom,
    MaeLite,
}

/// Frozen vision tower (prefix `dom.`) standing in for a domain-specific
/// foundation model. Output is the mean over patch tokens after the final
/// norm, width `d_dom`.
#[derive(Debug, Clone)]
pub struct DomainEncoder {
    pub dims: EncoderDims,
    pub tower: Tower,
    pub frozen: bool,
    pub provenance: DomainProvenance,
}

impl DomainEncoder {
    pub fn new(dims: EncoderDims, provenance: DomainProvenance) -> Self {
        let tower = Tower::new("dom", &dims, dims.d_dom);
        DomainEncoder {
            dims,
            tower,
            frozen: false,
            provenance,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &Stream) {
        let d = self.dims.d_dom;
        let pd = self.dims.patch_dim();
        store.insert_uniform("dom.patch.w", vec![pd, d], 1.0 / (pd as f64).sqrt(), init);
        store.insert_zeros("dom.patch.b", vec![d]);
        store.insert_uniform("dom.cls", vec![1, d], 0.1, init);
        store.insert_uniform("dom.pos", vec![1 + self.dims.num_patches(), d], 0.1, init);
        self.tower.init(store, init);
        // Masked-reconstruction head; unused after pretraining.
        store.insert_uniform("dom.mask", vec![1, d], 0.1, init);
        store.insert_uniform("dom.dec.w", vec![d, pd], 1.0 / (d as f64).sqrt(), init);
        store.insert_zeros("dom.dec.b", vec![pd]);
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn assemble(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        patch_emb: TensorId,
    ) -> Result<TensorId> {
        let np = self.dims.num_patches();
        let pos = binder.bind(tape, "dom.pos")?;
        let patch_pos = tape.slice_rows(pos, 1, np)?;
        let emb = tape.add(patch_emb, patch_pos)?;
        let cls = binder.bind(tape, "dom.cls")?;
        let cls_pos = tape.slice_rows(pos, 0, 1)?;
        let cls = tape.add(cls, cls_pos)?;
        tape.concat_rows(&[cls, emb])
    }

    /// Pooled domain feature `F_d`, `[1, d_dom]`. Requires a frozen encoder.
    pub fn encode(&self, tape: &mut Tape, binder: &mut Binder, image: &Image) -> Result<TensorId> {
        if !self.frozen {
            return Err(Error::Config(
                "domain encoder used before freeze".to_string(),
            ));
        }
        let np = self.dims.num_patches();
        let pd = self.dims.patch_dim();
        let raw = patchify(image, self.dims.img, self.dims.patch)?;
        let patches = tape.constant(raw, vec![np, pd]);
        let w = binder.bind(tape, "dom.patch.w")?;
        let b = binder.bind(tape, "dom.patch.b")?;
        let emb = tape.matmul(patches, w)?;
        let emb = tape.add_bcast(emb, b)?;
        let mut x = self.assemble(tape, binder, emb)?;
        for i in 0..self.dims.m {
            x = self.tower.block(tape, binder, i, x)?;
        }
        let x = self.tower.final_norm(tape, binder, x)?;
        let patch_rows = tape.slice_rows(x, 1, np)?;
        let pooled = tape.mean_axis(patch_rows, 0)?;
        tape.reshape(pooled, vec![1, self.dims.d_dom])
    }
}

/// Trainable two-layer projection (prefix `proj_d`) from domain features to
/// the shared width, GELU between the affine maps.
#[derive(Debug, Clone)]
pub struct DomainProjection {
    pub d_dom: usize,
    pub d: usize,
}

impl DomainProjection {
    pub fn new(dims: &EncoderDims) -> Self {
        DomainProjection {
            d_dom: dims.d_dom,
            d: dims.d,
        }
    }

    pub fn param_names() -> [&'static str; 4] {
        ["proj_d.w1", "proj_d.b1", "proj_d.w2", "proj_d.b2"]
    }

    pub fn init(&self, store: &mut ParamStore, init: &Stream) {
        store.insert_uniform(
            "proj_d.w1",
            vec![self.d_dom, self.d],
            1.0 / (self.d_dom as f64).sqrt(),
            init,
        );
        store.insert_zeros("proj_d.b1", vec![self.d]);
        store.insert_uniform(
            "proj_d.w2",
            vec![self.d, self.d],
            1.0 / (self.d as f64).sqrt(),
            init,
        );
        store.insert_zeros("proj_d.b2", vec![self.d]);
    }

    /// `F_hat = L_d(F_d)`, `[1, d]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, f_d: TensorId) -> Result<TensorId> {
        let shape = tape.shape(f_d).to_vec();
        if shape.len() != 2 || shape[1] != self.d_dom {
            return Err(Error::ShapeMismatch {
                op: "domain_project",
                lhs: shape,
                rhs: vec![self.d_dom],
            });
        }
        let w1 = binder.bind(tape, "proj_d.w1")?;
        let b1 = binder.bind(tape, "proj_d.b1")?;
        let w2 = binder.bind(tape, "proj_d.w2")?;
        let b2 = binder.bind(tape, "proj_d.b2")?;
        let h = tape.matmul(f_d, w1)?;
        let h = tape.add_bcast(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        tape.add_bcast(h, b2)
    }
}

fn trainable_with_prefix(store: &ParamStore, prefix: &str) -> BTreeSet<String> {
    store.names_with_prefix(prefix).into_iter().collect()
}

/// Masked-patch reconstruction pretraining of the domain encoder: mask a
/// fraction of patch embeddings, reconstruct raw patch pixels through a
/// single linear decoder under mean squared error, then freeze.
///
/// Returns the per-step training losses alongside the frozen encoder.
#[allow(clippy::too_many_arguments)]
pub fn mae_lite_pretrain(
    store: &mut ParamStore,
    dims: EncoderDims,
    images: &[Image],
    mask_ratio: f64,
    steps: usize,
    batch: usize,
    cfg: &SgdConfig,
    rng: &mut Stream,
) -> Result<(DomainEncoder, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Config("mae pretraining needs images".to_string()));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!(
            "mask_ratio must be in [0, 1), got {mask_ratio}"
        )));
    }
    dims.validate()?;
    let mut enc = DomainEncoder::new(dims, DomainProvenance::MaeLite);
    if !store.contains("dom.patch.w") {
        enc.init(store, &rng.fork("dom-init"));
    }
    let trainable = trainable_with_prefix(store, "dom.");
    let names: Vec<String> = trainable.iter().cloned().collect();
    let mut state = SgdState::new();
    let mut losses = Vec::with_capacity(steps);
    // Loss is only defined on a frozen-shape encoder; flip the flag for the
    // duration of training so `encode` stays guarded for everyone else.
    enc.frozen = false;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let mut batch_losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let img = &images[rng.below(images.len())];
            let loss = mae_loss(&mut tape, &mut binder, &enc, img, mask_ratio, rng)?;
            batch_losses.push(loss);
        }
        let stacked = tape.concat_rows(&batch_losses)?;
        let loss = tape.mean_all(stacked);
        losses.push(tape.value(loss));
        tape.backward(loss)?;
        let grads: std::collections::BTreeMap<String, Vec<f64>> =
            tape.named_grads().into_iter().collect();
        drop(binder);
        sgd_step(store, &grads, &names, cfg, &mut state)?;
    }
    enc.freeze();
    Ok((enc, losses))
}

fn mae_loss(
    tape: &mut Tape,
    binder: &mut Binder,
    enc: &DomainEncoder,
    image: &Image,
    mask_ratio: f64,
    rng: &mut Stream,
) -> Result<TensorId> {
    let np = enc.dims.num_patches();
    let pd = enc.dims.patch_dim();
    let n_masked = ((np as f64) * mask_ratio).round() as usize;
    let mut order: Vec<usize> = (0..np).collect();
    rng.shuffle(&mut order);
    let masked: BTreeSet<usize> = order[..n_masked].iter().cloned().collect();

    let raw = patchify(image, enc.dims.img, enc.dims.patch)?;
    let patches = tape.constant(raw.clone(), vec![np, pd]);
    let w = binder.bind(tape, "dom.patch.w")?;
    let b = binder.bind(tape, "dom.patch.b")?;
    let emb = tape.matmul(patches, w)?;
    let emb = tape.add_bcast(emb, b)?;

    // Keep-mask as constants: visible rows pass through, masked rows are
    // replaced by the learned mask token.
    let d = enc.dims.d_dom;
    let mut keep = vec![0.0; np * d];
    let mut drop_m = vec![0.0; np * d];
    for p in 0..np {
        let v = if masked.contains(&p) { 0.0 } else { 1.0 };
        for c in 0..d {
            keep[p * d + c] = v;
            drop_m[p * d + c] = 1.0 - v;
        }
    }
    let keep_c = tape.constant(keep, vec![np, d]);
    let drop_c = tape.constant(drop_m, vec![np, d]);
    let mask_tok = binder.bind(tape, "dom.mask")?;
    let mask_rows = tape.broadcast_rows(mask_tok, np)?;
    let kept = tape.mul(emb, keep_c)?;
    let filled = tape.mul(mask_rows, drop_c)?;
    let mixed = tape.add(kept, filled)?;

    let mut x = enc.assemble(tape, binder, mixed)?;
    for i in 0..enc.dims.m {
        x = enc.tower.block(tape, binder, i, x)?;
    }
    let x = enc.tower.final_norm(tape, binder, x)?;
    let patch_out = tape.slice_rows(x, 1, np)?;
    let dw = binder.bind(tape, "dom.dec.w")?;
    let db = binder.bind(tape, "dom.dec.b")?;
    let rec = tape.matmul(patch_out, dw)?;
    let rec = tape.add_bcast(rec, db)?;

    let target = tape.constant(raw, vec![np, pd]);
    let diff = tape.sub(rec, target)?;
    let sq = tape.mul(diff, diff)?;
    if n_masked == 0 {
        // Degenerate but legal: score reconstruction of the visible tokens.
        let loss = tape.mean_all(sq);
        return tape.reshape(loss, vec![1, 1]);
    }
    let mut sel = vec![0.0; np * pd];
    for p in &masked {
        for c in 0..pd {
            sel[p * pd + c] = 1.0;
        }
    }
    let sel_c = tape.constant(sel, vec![np, pd]);
    let masked_sq = tape.mul(sq, sel_c)?;
    let total = tape.sum_all(masked_sq);
    let loss = tape.scale(total, 1.0 / (n_masked * pd) as f64);
    tape.reshape(loss, vec![1, 1])
}

/// Mean masked-reconstruction error of a frozen domain encoder on held-out
/// images; the quality oracle that separates pretrained from seeded-random.
pub fn masked_reconstruction_error(
    store: &ParamStore,
    enc: &DomainEncoder,
    images: &[Image],
    mask_ratio: f64,
    rng: &mut Stream,
) -> Result<f64> {
    let trainable = BTreeSet::new();
    let mut total = 0.0;
    for img in images {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let loss = mae_loss(&mut tape, &mut binder, enc, img, mask_ratio, rng)?;
        total += tape.data(loss)[0];
    }
    Ok(total / images.len() as f64)
}

/// Symmetric contrastive pretraining of the dual encoder on aligned
/// image/caption pairs. Every step samples `batch` distinct classes and one
/// image each, so in-batch negatives are always true mismatches.
#[allow(clippy::too_many_arguments)]
pub fn clip_lite_pretrain(
    store: &mut ParamStore,
    dims: EncoderDims,
    images_by_class: &[Vec<Image>],
    captions: &[Vec<usize>],
    steps: usize,
    batch: usize,
    tau: f64,
    cfg: &SgdConfig,
    rng: &mut Stream,
) -> Result<(VisionEncoder, TextEncoder, Vec<f64>)> {
    let n_classes = images_by_class.len();
    if n_classes < 2 {
        return Err(Error::Config(format!(
            "contrastive pretraining needs at least 2 classes, got {n_classes}"
        )));
    }
    if captions.len() != n_classes {
        return Err(Error::Config("one caption per class required".to_string()));
    }
    dims.validate()?;
    let vision = VisionEncoder::new(dims);
    let text = TextEncoder::new(dims);
    if !store.contains("base.v.patch.w") {
        vision.init(store, &rng.fork("base-v-init"));
        text.init(store, &rng.fork("base-t-init"));
    }
    let trainable = trainable_with_prefix(store, "base.");
    let names: Vec<String> = trainable.iter().cloned().collect();
    let mut state = SgdState::new();
    let bsz = batch.min(n_classes);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut class_order: Vec<usize> = (0..n_classes).collect();
        rng.shuffle(&mut class_order);
        let chosen = &class_order[..bsz];

        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let mut img_embs = Vec::with_capacity(bsz);
        let mut txt_embs = Vec::with_capacity(bsz);
        for &c in chosen {
            let pool = &images_by_class[c];
            let img = &pool[rng.below(pool.len())];
            img_embs.push(vision.forward_plain(&mut tape, &mut binder, img)?);
            txt_embs.push(text.forward_plain(&mut tape, &mut binder, &captions[c])?);
        }
        let imgs = tape.concat_rows(&img_embs)?;
        let txts = tape.concat_rows(&txt_embs)?;
        let imgs_n = tape.normalize_rows(imgs)?;
        let txts_n = tape.normalize_rows(txts)?;
        let txts_t = tape.transpose(txts_n)?;
        let logits = tape.matmul(imgs_n, txts_t)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let diag: Vec<usize> = (0..bsz).collect();

        let p_it = tape.softmax_rows(logits)?;
        let picked_it = tape.gather_cols(p_it, &diag)?;
        let picked_it = tape.reshape(picked_it, vec![1, bsz])?;
        let log_it = tape.log(picked_it)?;
        let l_it = tape.mean_all(log_it);

        let logits_t = tape.transpose(logits)?;
        let p_ti = tape.softmax_rows(logits_t)?;
        let picked_ti = tape.gather_cols(p_ti, &diag)?;
        let picked_ti = tape.reshape(picked_ti, vec![1, bsz])?;
        let log_ti = tape.log(picked_ti)?;
        let l_ti = tape.mean_all(log_ti);

        let sum = tape.add(l_it, l_ti)?;
        let loss = tape.scale(sum, -0.5);
        losses.push(tape.value(loss));
        tape.backward(loss)?;
        let grads: std::collections::BTreeMap<String, Vec<f64>> =
            tape.named_grads().into_iter().collect();
        drop(binder);
        sgd_step(store, &grads, &names, cfg, &mut state)?;
    }
    Ok((vision, text, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> EncoderDims {
        EncoderDims {
            d: 8,
            m: 2,
            heads: 2,
            mlp_hidden: 16,
            img: 16,
            patch: 8,
            d_dom: 8,
            vocab: 16,
            max_text_len: 8,
        }
    }

    fn flat_image(v: f64, img: usize) -> Image {
        Image {
            pixels: vec![v; img * img],
        }
    }

    #[test]
    fn patch_count_follows_arithmetic() {
        let dims = EncoderDims::default();
        assert_eq!(dims.num_patches(), 16); // 32x32 image, patch 8
        let img = flat_image(0.5, 32);
        let raw = patchify(&img, 32, 8).unwrap();
        assert_eq!(raw.len(), 16 * 64);
    }

    #[test]
    fn indivisible_extent_rejected() {
        let img = flat_image(0.0, 30);
        assert!(patchify(&img, 30, 8).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_patch_tokens() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(dims);
        enc.init(&mut store, &Stream::new("enc-zero", 0));
        // Zero the positional table so the embedding is purely the patch map.
        let pos = store.get_mut("base.v.pos").unwrap();
        pos.data.iter_mut().for_each(|v| *v = 0.0);
        let trainable = BTreeSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, &trainable);
        let (emb, _) = enc
            .embed(&mut tape, &mut binder, &flat_image(0.0, 16))
            .unwrap();
        assert!(tape.data(emb).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embeddings_are_deterministic() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let enc = VisionEncoder::new(dims);
        enc.init(&mut store, &Stream::new("enc-det", 0));
        let img = Image {
            pixels: (0..256).map(|i| (i as f64 * 0.37).sin()).collect(),
        };
        let run = || {
            let trainable = BTreeSet::new();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store, &trainable);
            let out = enc.forward_plain(&mut tape, &mut binder, &img).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn domain_encoder_errors_before_freeze() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let enc = DomainEncoder::new(dims, DomainProvenance::SeededRandom);
        enc.init(&mut store, &Stream::new("dom-frozen", 0));
        let trainable = BTreeSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, &trainable);
        assert!(enc
            .encode(&mut tape, &mut binder, &flat_image(0.1, 16))
            .is_err());
    }

    #[test]
    fn frozen_domain_encoder_gets_no_gradients() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let mut enc = DomainEncoder::new(dims, DomainProvenance::SeededRandom);
        enc.init(&mut store, &Stream::new("dom-nograd", 1));
        enc.freeze();
        let proj = DomainProjection::new(&dims);
        proj.init(&mut store, &Stream::new("proj-init", 1));
        let trainable: BTreeSet<String> = DomainProjection::param_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, &trainable);
        let f_d = enc
            .encode(&mut tape, &mut binder, &flat_image(0.3, 16))
            .unwrap();
        let f_hat = proj.forward(&mut tape, &mut binder, f_d).unwrap();
        let loss = tape.mean_all(f_hat);
        tape.backward(loss).unwrap();
        let grads = tape.named_grads();
        assert!(grads.iter().all(|(n, _)| !n.starts_with("dom.")));
        assert!(grads.iter().any(|(n, _)| n.starts_with("proj_d.")));
    }

    #[test]
    fn domain_feature_is_finite_and_reproducible() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let mut enc = DomainEncoder::new(dims, DomainProvenance::SeededRandom);
        enc.init(&mut store, &Stream::new("dom-det", 2));
        enc.freeze();
        let img = Image {
            pixels: (0..256).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect(),
        };
        let run = || {
            let trainable = BTreeSet::new();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store, &trainable);
            let out = enc.encode(&mut tape, &mut binder, &img).unwrap();
            tape.data(out).to_vec()
        };
        let a = run();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn projection_output_width_and_zero_case() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let proj = DomainProjection::new(&dims);
        proj.init(&mut store, &Stream::new("proj-width", 0));
        let trainable = BTreeSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, &trainable);
        let f_d = tape.constant(vec![0.0; dims.d_dom], vec![1, dims.d_dom]);
        let out = proj.forward(&mut tape, &mut binder, f_d).unwrap();
        assert_eq!(tape.shape(out), &[1, dims.d]);
        // gelu(0) = 0 and biases start at zero, so the output is exactly zero
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
        let bad = tape.constant(vec![0.0; 3], vec![1, 3]);
        assert!(proj.forward(&mut tape, &mut binder, bad).is_err());
    }

    #[test]
    fn mae_pretrain_runs_and_freezes() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let mut rng = Stream::new("mae-test", 0);
        let images: Vec<Image> = (0..6)
            .map(|i| Image {
                pixels: (0..256)
                    .map(|p| ((p + i * 31) as f64 * 0.11).sin())
                    .collect(),
            })
            .collect();
        let cfg = SgdConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
        };
        let (enc, losses) =
            mae_lite_pretrain(&mut store, dims, &images, 0.5, 12, 2, &cfg, &mut rng).unwrap();
        assert!(enc.frozen);
        assert_eq!(losses.len(), 12);
        assert!(losses.iter().all(|l| l.is_finite()));
        // training reduces the reconstruction loss from its first step
        assert!(
            losses.last().unwrap() <= losses.first().unwrap(),
            "{losses:?}"
        );
        assert!(mae_lite_pretrain(&mut store, dims, &[], 0.5, 1, 1, &cfg, &mut rng).is_err());
    }

    #[test]
    fn mask_ratio_zero_is_degenerate_but_legal() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let mut rng = Stream::new("mae-zero", 0);
        let images = vec![flat_image(0.25, 16)];
        let cfg = SgdConfig {
            learning_rate: 1e-3,
            momentum: 0.0,
        };
        let (enc, losses) =
            mae_lite_pretrain(&mut store, dims, &images, 0.0, 3, 1, &cfg, &mut rng).unwrap();
        assert!(enc.frozen);
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn clip_pretrain_rejects_single_class() {
        let dims = tiny_dims();
        let mut store = ParamStore::new();
        let mut rng = Stream::new("clip-one", 0);
        let err = clip_lite_pretrain(
            &mut store,
            dims,
            &[vec![flat_image(0.1, 16)]],
            &[vec![0, 1]],
            1,
            2,
            0.07,
            &SgdConfig::default(),
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn symmetric_loss_near_zero_at_perfect_alignment() {
        // Identical normalized embeddings per pair, distinct across pairs,
        // low temperature: the matched logit dominates and the loss vanishes.
        let mut tape = Tape::new();
        let e = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let en = tape.normalize_rows(e).unwrap();
        let et = tape.transpose(en).unwrap();
        let logits = tape.matmul(en, et).unwrap();
        let logits = tape.scale(logits, 1.0 / 0.01);
        let p = tape.softmax_rows(logits).unwrap();
        let picked = tape.gather_cols(p, &[0, 1]).unwrap();
        let picked = tape.reshape(picked, vec![1, 2]).unwrap();
        let lg = tape.log(picked).unwrap();
        let loss_half = tape.mean_all(lg);
        let loss = tape.scale(loss_half, -1.0);
        assert!(tape.value(loss) < 1e-12, "loss {}", tape.value(loss));
    }
}
