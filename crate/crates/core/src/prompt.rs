//! Cross-modal prompt generation and propagation over the frozen dual
//! encoder: quaternion-mixed language context, per-layer generated vision
//! prompts, cross-modal low-rank shifts, and the cosine classifier head.
//!
//! Only the prompt side trains: context/prompt vectors, the quaternion
//! layers, the domain projection, and the low-rank adapters. Encoder weights
//! are bound as constants for the whole episode.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{category_tokens, Image, N_CTX};
use crate::encoder::{DomainEncoder, DomainProjection, EncoderDims, TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::quat::{extract_context, pack_slots, QuatAct, QuatLinear, SlotPattern};
use crate::rng::Stream;
use crate::tape::{Tape, TensorId};

/// Prompt-side configuration for one episode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Prompt depth: leading encoder layers that receive injected prompts.
    pub k: usize,
    /// Prompt tokens appended per prompted layer.
    pub n_prompt: usize,
    pub pattern: SlotPattern,
    pub quat_enabled: bool,
    pub lora_enabled: bool,
    /// Low-rank dimension V of every shift operator.
    pub lora_rank: usize,
    /// Classifier temperature.
    pub tau: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            k: 3,
            n_prompt: 2,
            pattern: SlotPattern::AB_DEFAULT,
            quat_enabled: true,
            lora_enabled: true,
            lora_rank: 4,
            tau: 0.07,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, dims: &EncoderDims) -> Result<()> {
        if self.k >= dims.m {
            return Err(Error::Config(format!(
                "prompt depth {} must be below the {} encoder layers",
                self.k, dims.m
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.lora_enabled && self.lora_rank == 0 {
            return Err(Error::Config("lora rank must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// How low-rank down-projections start out. Zero keeps the adapted model
/// exactly equal to the unadapted one at initialization; gradient checks use
/// small random values so every factor participates from the first pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaInit {
    Zero,
    SmallRandom,
}

/// Register every prompt-side parameter for `cfg` under the `ctx.`, `qt.`,
/// `qv{i}.`, and `lora.` prefixes.
pub fn init_prompt_params(
    store: &mut ParamStore,
    dims: &EncoderDims,
    cfg: &PromptConfig,
    alpha_init: AlphaInit,
    init: &Stream,
) {
    let d = dims.d;
    store.insert_uniform("ctx.e_c", vec![N_CTX, d], 0.1, init);
    for i in 1..=cfg.k {
        store.insert_uniform(&format!("ctx.p_l{i}"), vec![cfg.n_prompt, d], 0.1, init);
    }
    if cfg.quat_enabled {
        QuatLinear::init(store, "qt", d, d, init);
        for i in 1..=cfg.k {
            QuatLinear::init(store, &format!("qv{i}"), d, d, init);
        }
    }
    if cfg.lora_enabled {
        let v = cfg.lora_rank;
        let bound = 1.0 / (d as f64).sqrt();
        for branch in ["l", "v"] {
            for i in 2..=dims.m {
                let p = format!("lora.{branch}{i}");
                store.insert_uniform(&format!("{p}.beta"), vec![d, v], bound, init);
                match alpha_init {
                    AlphaInit::Zero => store.insert_zeros(&format!("{p}.alpha"), vec![v, d]),
                    AlphaInit::SmallRandom => {
                        store.insert_uniform(&format!("{p}.alpha"), vec![v, d], bound, init)
                    }
                }
                store.insert(&format!("{p}.lam"), vec![v], vec![1.0; v]);
            }
        }
        let mut eye = vec![0.0; 4];
        eye[0] = 1.0;
        eye[3] = 1.0;
        store.insert("lora.mc", vec![2, 2], eye);
    }
}

/// Names of every parameter that trains during an episode: prompts, the
/// quaternion layers, the domain projection, and the adapters.
pub fn trainable_names(store: &ParamStore, cfg: &PromptConfig) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = store.names_with_prefix("ctx.").into_iter().collect();
    names.extend(store.names_with_prefix("proj_d."));
    if cfg.quat_enabled {
        names.extend(store.names_with_prefix("qt."));
        names.extend(store.names_with_prefix("qv"));
    }
    if cfg.lora_enabled {
        names.extend(store.names_with_prefix("lora."));
    }
    names
}

/// Mix the two diagonal vectors through the shared 2x2 matrix: stack them as
/// a 2xV matrix, left-multiply by `mc`, and unstack the rows.
pub fn cross_modal_update(
    tape: &mut Tape,
    mc: TensorId,
    lam_l: TensorId,
    lam_v: TensorId,
) -> Result<(TensorId, TensorId)> {
    let vl = tape.data(lam_l).len();
    let vv = tape.data(lam_v).len();
    if vl != vv {
        return Err(Error::ShapeMismatch {
            op: "cross_modal_update",
            lhs: tape.shape(lam_l).to_vec(),
            rhs: tape.shape(lam_v).to_vec(),
        });
    }
    let l_row = tape.reshape(lam_l, vec![1, vl])?;
    let v_row = tape.reshape(lam_v, vec![1, vl])?;
    let stacked = tape.concat_rows(&[l_row, v_row])?;
    let mixed = tape.matmul(mc, stacked)?;
    let l_hat = tape.slice_rows(mixed, 0, 1)?;
    let v_hat = tape.slice_rows(mixed, 1, 1)?;
    let l_hat = tape.reshape(l_hat, vec![vl])?;
    let v_hat = tape.reshape(v_hat, vec![vl])?;
    Ok((l_hat, v_hat))
}

/// Add the low-rank domain shift to a layer's embedding stream:
/// `E_i + beta diag(lam_hat) alpha E_prev`, applied per token row.
pub fn lora_shift(
    tape: &mut Tape,
    e_i: TensorId,
    e_prev: TensorId,
    beta: TensorId,
    lam_hat: TensorId,
    alpha: TensorId,
) -> Result<TensorId> {
    if tape.shape(e_i) != tape.shape(e_prev) {
        return Err(Error::ShapeMismatch {
            op: "lora_shift",
            lhs: tape.shape(e_i).to_vec(),
            rhs: tape.shape(e_prev).to_vec(),
        });
    }
    let alpha_t = tape.transpose(alpha)?;
    let down = tape.matmul(e_prev, alpha_t)?;
    let scaled = tape.mul_bcast(down, lam_hat)?;
    let beta_t = tape.transpose(beta)?;
    let shift = tape.matmul(scaled, beta_t)?;
    tape.add(e_i, shift)
}

/// Per-layer cosine diagnostics between the two quaternion slot inputs:
/// entry 0 is context-vs-domain, entries 1..=k are prompt-vs-domain.
#[derive(Debug, Clone, Default)]
pub struct OrthTrace {
    pub per_layer: Vec<f64>,
}

/// Mean cosine between each row of `rows` and the vector `v`; zero-norm
/// pairs are excluded, and an all-excluded batch is NaN.
pub fn mean_row_cosine(rows: &[f64], width: usize, v: &[f64]) -> f64 {
    let nv = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let mut acc = 0.0;
    let mut count = 0;
    for row in rows.chunks(width) {
        let nr = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if nr < 1e-12 || nv < 1e-12 {
            continue; // undefined, excluded from the mean
        }
        let dot: f64 = row.iter().zip(v).map(|(&a, &b)| a * b).sum();
        acc += dot / (nr * nv);
        count += 1;
    }
    if count == 0 {
        f64::NAN
    } else {
        acc / count as f64
    }
}

/// The full prompted model over one episode's frozen components.
pub struct PromptModel<'a> {
    pub dims: EncoderDims,
    pub cfg: PromptConfig,
    pub vision: &'a VisionEncoder,
    pub text: &'a TextEncoder,
    pub domain: &'a DomainEncoder,
    pub proj: &'a DomainProjection,
}

/// One image's forward products.
pub struct ForwardOutput {
    /// `[1, C]` class probabilities over the candidate list.
    pub probs: TensorId,
    pub img_emb: TensorId,
    pub orth: OrthTrace,
}

impl<'a> PromptModel<'a> {
    pub fn new(
        dims: EncoderDims,
        cfg: PromptConfig,
        vision: &'a VisionEncoder,
        text: &'a TextEncoder,
        domain: &'a DomainEncoder,
        proj: &'a DomainProjection,
    ) -> Result<Self> {
        cfg.validate(&dims)?;
        Ok(PromptModel {
            dims,
            cfg,
            vision,
            text,
            domain,
            proj,
        })
    }

    /// Domain-specific context `T_d` `[n_ctx, d]`: context plus projected
    /// domain feature (plus mean-scaled Gaussian noise when training), packed
    /// into the quaternion slots with a zero companion and mixed by `Q_t`.
    pub fn gen_language_context(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        f_hat: TensorId,
        training: bool,
        noise: &mut Option<&mut Stream>,
    ) -> Result<TensorId> {
        if tape.data(f_hat).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gen_language_context: domain feature"));
        }
        let d = self.dims.d;
        let e_c = binder.bind(tape, "ctx.e_c")?;
        let f_rows = tape.broadcast_rows(f_hat, N_CTX)?;
        let mut ctx_side = e_c;
        if training {
            if let Some(rng) = noise.as_deref_mut() {
                // N_G = Mean(F_hat) * N_theta: standard Gaussian scaled by the
                // mean of the domain feature.
                let mean = tape.mean_all(f_hat);
                let draw = rng.normal_vec(N_CTX * d);
                let n_theta = tape.constant(draw, vec![N_CTX, d]);
                let n_g = tape.scale_by(n_theta, mean)?;
                ctx_side = tape.add(ctx_side, n_g)?;
            }
        }
        let summed = tape.add(ctx_side, f_rows)?;
        if !self.cfg.quat_enabled {
            // Feature augmentation fallback: the plain modal sum.
            return Ok(summed);
        }
        let zero = tape.constant(vec![0.0; N_CTX * d], vec![N_CTX, d]);
        let packed = pack_slots(tape, summed, zero, self.cfg.pattern)?;
        let layer = QuatLinear::new("qt", d, d, QuatAct::Relu);
        let out = layer.forward(tape, binder, &packed)?;
        Ok(extract_context(&out))
    }

    /// Generated vision prompt for layer `i`: `P_l^i + F_hat` through `Q_v^i`.
    /// No noise by design, training or not.
    pub fn gen_vision_prompt(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        f_hat: TensorId,
        i: usize,
    ) -> Result<TensorId> {
        let d = self.dims.d;
        let p_l = binder.bind(tape, &format!("ctx.p_l{i}"))?;
        let f_rows = tape.broadcast_rows(f_hat, self.cfg.n_prompt)?;
        let summed = tape.add(p_l, f_rows)?;
        if !self.cfg.quat_enabled {
            return Ok(summed);
        }
        let zero = tape.constant(vec![0.0; self.cfg.n_prompt * d], vec![self.cfg.n_prompt, d]);
        let packed = pack_slots(tape, summed, zero, self.cfg.pattern)?;
        let layer = QuatLinear::new(&format!("qv{i}"), d, d, QuatAct::Relu);
        let out = layer.forward(tape, binder, &packed)?;
        Ok(extract_context(&out))
    }

    fn lam_hats(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        layer: usize,
    ) -> Result<(TensorId, TensorId)> {
        let mc = binder.bind(tape, "lora.mc")?;
        let lam_l = binder.bind(tape, &format!("lora.l{layer}.lam"))?;
        let lam_v = binder.bind(tape, &format!("lora.v{layer}.lam"))?;
        cross_modal_update(tape, mc, lam_l, lam_v)
    }

    fn apply_shift(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        branch: &str,
        layer: usize,
        e_i: TensorId,
        e_prev: TensorId,
    ) -> Result<TensorId> {
        let (lam_l_hat, lam_v_hat) = self.lam_hats(tape, binder, layer)?;
        let lam_hat = if branch == "l" { lam_l_hat } else { lam_v_hat };
        let beta = binder.bind(tape, &format!("lora.{branch}{layer}.beta"))?;
        let alpha = binder.bind(tape, &format!("lora.{branch}{layer}.alpha"))?;
        lora_shift(tape, e_i, e_prev, beta, lam_hat, alpha)
    }

    /// Assemble `[T_d ; C_t]` for one category: generated context rows first,
    /// then the raw category token embeddings. Positional rows are the
    /// encoder's own input processing, applied in `propagate_language`.
    pub fn build_language_input(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        t_d: TensorId,
        class_id: usize,
    ) -> Result<TensorId> {
        let shape = tape.shape(t_d).to_vec();
        if shape.len() != 2 || shape[1] != self.dims.d {
            return Err(Error::ShapeMismatch {
                op: "build_language_input",
                lhs: shape,
                rhs: vec![N_CTX, self.dims.d],
            });
        }
        let cat = category_tokens(class_id);
        let cat_emb = self.text.embed_tokens_raw(tape, binder, &cat)?;
        tape.concat_rows(&[t_d, cat_emb])
    }

    /// Language-branch propagation with per-layer prompt injection and
    /// low-rank shifts; pooled at the last category-token position.
    pub fn propagate_language(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        t_d: TensorId,
        class_id: usize,
    ) -> Result<TensorId> {
        let raw = self.build_language_input(tape, binder, t_d, class_id)?;
        let seq = self.text.add_positions(tape, binder, raw)?;
        let base_len = tape.shape(seq)[0];
        let k = self.cfg.k;
        let mut emb = seq;
        let mut prompt: Option<TensorId> = None;
        for i in 1..=self.dims.m {
            if i <= k {
                // learnable prompt replaces whatever the previous layer emitted
                prompt = Some(binder.bind(tape, &format!("ctx.p_l{i}"))?);
            }
            let input = match prompt {
                Some(p) => tape.concat_rows(&[emb, p])?,
                None => emb,
            };
            let out = self.text.tower.block(tape, binder, i - 1, input)?;
            let mut e_next = tape.slice_rows(out, 0, base_len)?;
            if k > 0 {
                prompt = Some(tape.slice_rows(out, base_len, self.cfg.n_prompt)?);
            }
            if self.cfg.lora_enabled && i >= 2 {
                e_next = self.apply_shift(tape, binder, "l", i, e_next, emb)?;
            }
            emb = e_next;
        }
        self.text.pool(
            tape,
            binder,
            emb,
            Some(N_CTX + category_tokens(0).len() - 1),
        )
    }

    /// Vision-branch propagation: class token participates at every layer,
    /// generated prompts are injected for the first `k` layers, shifts apply
    /// to the patch-embedding stream.
    pub fn propagate_vision(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Image,
        f_hat: TensorId,
    ) -> Result<TensorId> {
        let (emb0, cls0) = self.vision.embed(tape, binder, image)?;
        let np = self.dims.num_patches();
        let k = self.cfg.k;
        let mut cls = cls0;
        let mut emb = emb0;
        let mut prompt: Option<TensorId> = None;
        for i in 1..=self.dims.m {
            if i <= k {
                prompt = Some(self.gen_vision_prompt(tape, binder, f_hat, i)?);
            }
            let input = match prompt {
                Some(p) => tape.concat_rows(&[cls, emb, p])?,
                None => tape.concat_rows(&[cls, emb])?,
            };
            let out = self.vision.tower.block(tape, binder, i - 1, input)?;
            let cls_next = tape.slice_rows(out, 0, 1)?;
            let mut e_next = tape.slice_rows(out, 1, np)?;
            if k > 0 {
                prompt = Some(tape.slice_rows(out, 1 + np, self.cfg.n_prompt)?);
            }
            if self.cfg.lora_enabled && i >= 2 {
                e_next = self.apply_shift(tape, binder, "v", i, e_next, emb)?;
            }
            cls = cls_next;
            emb = e_next;
        }
        let seq = tape.concat_rows(&[cls, emb])?;
        let x = self.vision.tower.final_norm(tape, binder, seq)?;
        let cls_out = tape.slice_rows(x, 0, 1)?;
        let proj = binder.bind(tape, "base.v.proj")?;
        tape.matmul(cls_out, proj)
    }

    /// Cosine classifier over candidate categories:
    /// `p_i = softmax(sim(img, txt_i) / tau)`.
    pub fn classify(
        &self,
        tape: &mut Tape,
        img_emb: TensorId,
        txt_embs: &[TensorId],
    ) -> Result<TensorId> {
        if txt_embs.is_empty() {
            return Err(Error::Config(
                "classify needs at least one category".to_string(),
            ));
        }
        let c = txt_embs.len();
        let txt = tape.concat_rows(txt_embs)?;
        let img_rows = tape.broadcast_rows(img_emb, c)?;
        let sims = tape.cosine_rows(img_rows, txt)?;
        let sims = tape.reshape(sims, vec![1, c])?;
        let scaled = tape.scale(sims, 1.0 / self.cfg.tau);
        tape.softmax_rows(scaled)
    }

    /// Full forward for one image against a candidate class list.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        image: &Image,
        candidates: &[usize],
        training: bool,
        noise: &mut Option<&mut Stream>,
    ) -> Result<ForwardOutput> {
        let f_d = self.domain.encode(tape, binder, image)?;
        let f_hat = self.proj.forward(tape, binder, f_d)?;
        let t_d = self.gen_language_context(tape, binder, f_hat, training, noise)?;
        let mut txt_embs = Vec::with_capacity(candidates.len());
        for &c in candidates {
            txt_embs.push(self.propagate_language(tape, binder, t_d, c)?);
        }
        let img_emb = self.propagate_vision(tape, binder, image, f_hat)?;
        let probs = self.classify(tape, img_emb, &txt_embs)?;

        // Orthogonality diagnostics on values: context-side slot input vs the
        // domain-side feature, for the language mixer and each vision mixer.
        let f_vals = tape.data(f_hat).to_vec();
        let d = self.dims.d;
        let mut per_layer = Vec::with_capacity(1 + self.cfg.k);
        let e_c = binder.bind(tape, "ctx.e_c")?;
        per_layer.push(mean_row_cosine(tape.data(e_c), d, &f_vals));
        for i in 1..=self.cfg.k {
            let p_l = binder.bind(tape, &format!("ctx.p_l{i}"))?;
            per_layer.push(mean_row_cosine(tape.data(p_l), d, &f_vals));
        }
        Ok(ForwardOutput {
            probs,
            img_emb,
            orth: OrthTrace { per_layer },
        })
    }
}

/// Mean negative log probability of the true class over a batch of
/// probability rows.
pub fn contrastive_loss(tape: &mut Tape, probs: TensorId, labels: &[usize]) -> Result<TensorId> {
    let picked = tape.gather_cols(probs, labels)?;
    let n = labels.len();
    let picked = tape.reshape(picked, vec![1, n])?;
    let lg = tape.log(picked)?;
    let mean = tape.mean_all(lg);
    Ok(tape.scale(mean, -1.0))
}
