//! Central-difference gradient verification, including the end-to-end suite
//! over a micro prompted model that exercises every trainable group.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::data::Image;
use crate::encoder::{
    DomainEncoder, DomainProjection, DomainProvenance, EncoderDims, TextEncoder, VisionEncoder,
};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::prompt::{
    contrastive_loss, init_prompt_params, trainable_names, AlphaInit, PromptConfig, PromptModel,
};
use crate::rng::Stream;
use crate::tape::Tape;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Tolerance every analytic gradient in this workspace is held to.
pub const GRAD_TOL: f64 = 1e-4;

/// Compare an analytic gradient against central differences of `f` around
/// `theta`, one coordinate at a time. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be a deterministic scalar function of the parameter vector; any
/// non-finite evaluation is an error.
pub fn finite_diff_check<F>(mut f: F, theta: &mut [f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(theta.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = f(theta)?;
        theta[i] = orig - h;
        let fm = f(theta)?;
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

/// A small end-to-end prompted model: d=8, m=2, k=1, V=2, C=3, batch=2.
/// Low-rank down-projections start random so every factor feeds the loss.
pub struct MicroModel {
    pub dims: EncoderDims,
    pub pcfg: PromptConfig,
    pub store: ParamStore,
    pub images: Vec<Image>,
    pub candidates: Vec<usize>,
    pub labels: Vec<usize>,
}

impl MicroModel {
    pub fn new(seed: u64) -> Self {
        Self::with_depth(seed, 2, 1)
    }

    /// `m = 3` is the smallest depth at which every vision-side adapter
    /// feeds the loss: a final-layer patch shift never reaches the class
    /// token, so at `m = 2` that group's gradient is structurally zero.
    pub fn with_depth(seed: u64, m: usize, k: usize) -> Self {
        let dims = EncoderDims {
            d: 8,
            m,
            heads: 2,
            mlp_hidden: 16,
            img: 16,
            patch: 8,
            d_dom: 8,
            vocab: 16,
            max_text_len: 10,
        };
        let pcfg = PromptConfig {
            k,
            n_prompt: 2,
            lora_rank: 2,
            ..PromptConfig::default()
        };
        let init = Stream::new("micro-init", seed);
        let mut store = ParamStore::new();
        VisionEncoder::new(dims).init(&mut store, &init.fork("v"));
        TextEncoder::new(dims).init(&mut store, &init.fork("t"));
        DomainEncoder::new(dims, DomainProvenance::SeededRandom).init(&mut store, &init.fork("d"));
        DomainProjection::new(&dims).init(&mut store, &init.fork("p"));
        init_prompt_params(
            &mut store,
            &dims,
            &pcfg,
            AlphaInit::SmallRandom,
            &init.fork("q"),
        );

        let mut data = Stream::new("micro-data", seed);
        let images = (0..2)
            .map(|_| Image {
                pixels: data.normal_vec(dims.img * dims.img),
            })
            .collect();
        MicroModel {
            dims,
            pcfg,
            store,
            images,
            candidates: vec![0, 1, 2],
            labels: vec![0, 1],
        }
    }

    fn loss_of(&self, store: &ParamStore) -> Result<f64> {
        let vision = VisionEncoder::new(self.dims);
        let text = TextEncoder::new(self.dims);
        let mut domain = DomainEncoder::new(self.dims, DomainProvenance::SeededRandom);
        domain.freeze();
        let proj = DomainProjection::new(&self.dims);
        let model = PromptModel::new(self.dims, self.pcfg, &vision, &text, &domain, &proj)?;
        let trainable = std::collections::BTreeSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let mut rows = Vec::new();
        for image in &self.images {
            let out = model.forward_image(
                &mut tape,
                &mut binder,
                image,
                &self.candidates,
                false,
                &mut None,
            )?;
            rows.push(out.probs);
        }
        let probs = tape.concat_rows(&rows)?;
        let loss = contrastive_loss(&mut tape, probs, &self.labels)?;
        Ok(tape.value(loss))
    }

    /// Analytic gradients of the batch loss for every trainable parameter.
    pub fn analytic_grads(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let vision = VisionEncoder::new(self.dims);
        let text = TextEncoder::new(self.dims);
        let mut domain = DomainEncoder::new(self.dims, DomainProvenance::SeededRandom);
        domain.freeze();
        let proj = DomainProjection::new(&self.dims);
        let model = PromptModel::new(self.dims, self.pcfg, &vision, &text, &domain, &proj)?;
        let trainable = trainable_names(&self.store, &self.pcfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store, &trainable);
        let mut rows = Vec::new();
        for image in &self.images {
            let out = model.forward_image(
                &mut tape,
                &mut binder,
                image,
                &self.candidates,
                false,
                &mut None,
            )?;
            rows.push(out.probs);
        }
        let probs = tape.concat_rows(&rows)?;
        let loss = contrastive_loss(&mut tape, probs, &self.labels)?;
        tape.backward(loss)?;
        Ok(tape.named_grads().into_iter().collect())
    }

    /// Names of every trainable parameter, grouped for reporting.
    pub fn groups(&self) -> Vec<(String, Vec<String>)> {
        let trainable = trainable_names(&self.store, &self.pcfg);
        let group_of = |name: &str| -> String {
            for prefix in [
                "ctx.e_c", "ctx.p_l", "qt.", "qv", "proj_d.", "lora.mc", "lora.l", "lora.v",
            ] {
                if name.starts_with(prefix) {
                    return prefix.trim_end_matches('.').to_string();
                }
            }
            name.to_string()
        };
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for name in trainable {
            groups.entry(group_of(&name)).or_default().push(name);
        }
        groups.into_iter().collect()
    }

    /// Max relative error of analytic vs central-difference gradients, per
    /// group. The backbone verification of the whole differentiation path.
    pub fn gradient_suite(&self) -> Result<Vec<(String, f64)>> {
        let analytic = self.analytic_grads()?;
        let store = RefCell::new(self.store.clone());
        let mut results = Vec::new();
        for (group, names) in self.groups() {
            let mut theta = Vec::new();
            let mut grad = Vec::new();
            for name in &names {
                theta.extend_from_slice(&self.store.get(name)?.data);
                let g = analytic
                    .get(name)
                    .ok_or_else(|| Error::MissingGrad(name.clone()))?;
                grad.extend_from_slice(g);
            }
            let f = |t: &[f64]| -> Result<f64> {
                {
                    let mut s = store.borrow_mut();
                    let mut off = 0;
                    for name in &names {
                        let p = s.get_mut(name)?;
                        let n = p.data.len();
                        p.data.copy_from_slice(&t[off..off + n]);
                        off += n;
                    }
                }
                let s = store.borrow();
                self.loss_of(&s)
            };
            let worst = finite_diff_check(f, &mut theta, &grad, FD_STEP)?;
            // restore the group before moving to the next
            {
                let mut s = store.borrow_mut();
                for name in &names {
                    let orig = self.store.get(name)?.data.clone();
                    s.get_mut(name)?.data = orig;
                }
            }
            results.push((group, worst));
        }
        Ok(results)
    }
}
