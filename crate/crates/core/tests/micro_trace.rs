//! Independent straight-line reimplementation of the prompted forward pass.
//!
//! Everything here is plain `Vec<f64>` arithmetic reading weights out of the
//! parameter store: no tape, no shared helper code with the model under
//! test. A micro model's branch outputs must match this trace.

use std::collections::BTreeSet;

use dprompt_core::data::{category_tokens, Image, N_CTX};
use dprompt_core::encoder::{
    DomainEncoder, DomainProjection, DomainProvenance, EncoderDims, TextEncoder, VisionEncoder,
};
use dprompt_core::params::{Binder, ParamStore};
use dprompt_core::prompt::{init_prompt_params, AlphaInit, PromptConfig, PromptModel};
use dprompt_core::quat::SlotPattern;
use dprompt_core::rng::Stream;
use dprompt_core::tape::Tape;

struct Trace<'a> {
    store: &'a ParamStore,
    dims: EncoderDims,
    cfg: PromptConfig,
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * m + j];
            }
            c[i * m + j] = s;
        }
    }
    c
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

impl<'a> Trace<'a> {
    fn w(&self, name: &str) -> &[f64] {
        &self.store.get(name).unwrap().data
    }

    fn layer_norm(&self, x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        out
    }

    fn affine(&self, x: &[f64], t: usize, w: &str, b: &str, d_in: usize, d_out: usize) -> Vec<f64> {
        let mut y = matmul(x, self.w(w), t, d_in, d_out);
        let bias = self.w(b);
        for row in y.chunks_mut(d_out) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        y
    }

    fn attention(&self, prefix: &str, x: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
        let dh = d / heads;
        let q = self.affine(
            x,
            t,
            &format!("{prefix}.attn.wq"),
            &format!("{prefix}.attn.bq"),
            d,
            d,
        );
        let k = self.affine(
            x,
            t,
            &format!("{prefix}.attn.wk"),
            &format!("{prefix}.attn.bk"),
            d,
            d,
        );
        let v = self.affine(
            x,
            t,
            &format!("{prefix}.attn.wv"),
            &format!("{prefix}.attn.bv"),
            d,
            d,
        );
        let mut mixed = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                // scores of token i against every token, one head
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in scores.iter_mut() {
                    *s /= z;
                }
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += scores[j] * v[j * d + h * dh + c];
                    }
                    mixed[i * d + h * dh + c] = acc;
                }
            }
        }
        self.affine(
            &mixed,
            t,
            &format!("{prefix}.attn.wo"),
            &format!("{prefix}.attn.bo"),
            d,
            d,
        )
    }

    fn block(
        &self,
        tower: &str,
        i: usize,
        x: &[f64],
        t: usize,
        d: usize,
        hidden: usize,
    ) -> Vec<f64> {
        let p = format!("{tower}.blk{i}");
        let h = self.layer_norm(
            x,
            self.w(&format!("{p}.ln1.g")),
            self.w(&format!("{p}.ln1.b")),
            d,
        );
        let a = self.attention(&p, &h, t, d, self.dims.heads);
        let x1: Vec<f64> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let h2 = self.layer_norm(
            &x1,
            self.w(&format!("{p}.ln2.g")),
            self.w(&format!("{p}.ln2.b")),
            d,
        );
        let mut m1 = self.affine(
            &h2,
            t,
            &format!("{p}.mlp.w1"),
            &format!("{p}.mlp.b1"),
            d,
            hidden,
        );
        for v in m1.iter_mut() {
            *v = gelu(*v);
        }
        let m2 = self.affine(
            &m1,
            t,
            &format!("{p}.mlp.w2"),
            &format!("{p}.mlp.b2"),
            hidden,
            d,
        );
        x1.iter().zip(&m2).map(|(&u, &v)| u + v).collect()
    }

    fn patchify(&self, image: &Image) -> Vec<f64> {
        let (img, patch) = (self.dims.img, self.dims.patch);
        let per = img / patch;
        let mut out = Vec::new();
        for pr in 0..per {
            for pc in 0..per {
                for r in 0..patch {
                    for c in 0..patch {
                        out.push(image.pixels[(pr * patch + r) * img + pc * patch + c]);
                    }
                }
            }
        }
        out
    }

    fn domain_encode(&self, image: &Image) -> Vec<f64> {
        let d = self.dims.d_dom;
        let np = self.dims.num_patches();
        let raw = self.patchify(image);
        let mut emb = self.affine(
            &raw,
            np,
            "dom.patch.w",
            "dom.patch.b",
            self.dims.patch_dim(),
            d,
        );
        let pos = self.w("dom.pos");
        for (r, row) in emb.chunks_mut(d).enumerate() {
            for c in 0..d {
                row[c] += pos[(1 + r) * d + c];
            }
        }
        let mut seq = Vec::with_capacity((np + 1) * d);
        let cls = self.w("dom.cls");
        for c in 0..d {
            seq.push(cls[c] + pos[c]);
        }
        seq.extend_from_slice(&emb);
        let mut x = seq;
        for i in 0..self.dims.m {
            x = self.block("dom", i, &x, np + 1, d, self.dims.mlp_hidden);
        }
        let x = self.layer_norm(&x, self.w("dom.lnf.g"), self.w("dom.lnf.b"), d);
        let mut pooled = vec![0.0; d];
        for r in 1..=np {
            for c in 0..d {
                pooled[c] += x[r * d + c] / np as f64;
            }
        }
        pooled
    }

    fn project(&self, f_d: &[f64]) -> Vec<f64> {
        let mut h = self.affine(
            f_d,
            1,
            "proj_d.w1",
            "proj_d.b1",
            self.dims.d_dom,
            self.dims.d,
        );
        for v in h.iter_mut() {
            *v = gelu(*v);
        }
        self.affine(&h, 1, "proj_d.w2", "proj_d.b2", self.dims.d, self.dims.d)
    }

    /// act(W (x) Q) restricted to the r output under the default pattern
    /// `[a,b,*,*]` with the modal sum in the a slot and a zero companion:
    /// only `W_r` reaches the r output, so `out_r = relu(W_r a)`.
    fn quat_r_out(&self, prefix: &str, a: &[f64], rows: usize) -> Vec<f64> {
        let d = self.dims.d;
        let out = matmul(a, self.w(&format!("{prefix}.wr")), rows, d, d);
        out.iter().map(|&v| v.max(0.0)).collect()
    }

    fn gen_context(&self, f_hat: &[f64]) -> Vec<f64> {
        let d = self.dims.d;
        let e_c = self.w("ctx.e_c");
        let mut a = vec![0.0; N_CTX * d];
        for r in 0..N_CTX {
            for c in 0..d {
                a[r * d + c] = e_c[r * d + c] + f_hat[c];
            }
        }
        self.quat_r_out("qt", &a, N_CTX)
    }

    fn gen_vision_prompt(&self, f_hat: &[f64], i: usize) -> Vec<f64> {
        let d = self.dims.d;
        let p_l = self.w(&format!("ctx.p_l{i}"));
        let n = self.cfg.n_prompt;
        let mut a = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                a[r * d + c] = p_l[r * d + c] + f_hat[c];
            }
        }
        self.quat_r_out(&format!("qv{i}"), &a, n)
    }

    fn lora_shift(&self, branch: &str, layer: usize, e_prev: &[f64], t: usize) -> Vec<f64> {
        let d = self.dims.d;
        let v = self.cfg.lora_rank;
        let alpha = self.w(&format!("lora.{branch}{layer}.alpha")); // [v, d]
        let beta = self.w(&format!("lora.{branch}{layer}.beta")); // [d, v]
        let lam_l = self.w(&format!("lora.l{layer}.lam"));
        let lam_v = self.w(&format!("lora.v{layer}.lam"));
        let mc = self.w("lora.mc");
        let lam_hat: Vec<f64> = (0..v)
            .map(|j| {
                if branch == "l" {
                    mc[0] * lam_l[j] + mc[1] * lam_v[j]
                } else {
                    mc[2] * lam_l[j] + mc[3] * lam_v[j]
                }
            })
            .collect();
        let mut shift = vec![0.0; t * d];
        for r in 0..t {
            for j in 0..v {
                let mut down = 0.0;
                for c in 0..d {
                    down += e_prev[r * d + c] * alpha[j * d + c];
                }
                let scaled = down * lam_hat[j];
                for c in 0..d {
                    shift[r * d + c] += scaled * beta[c * v + j];
                }
            }
        }
        shift
    }

    fn language_branch(&self, t_d: &[f64], class_id: usize) -> Vec<f64> {
        let d = self.dims.d;
        let cat = category_tokens(class_id);
        let tok = self.w("base.t.tok");
        let pos = self.w("base.t.pos");
        let base_len = N_CTX + cat.len();
        // [T_d ; C_t] plus the encoder's positional rows over the full length
        let mut emb = vec![0.0; base_len * d];
        for r in 0..N_CTX {
            for c in 0..d {
                emb[r * d + c] = t_d[r * d + c] + pos[r * d + c];
            }
        }
        for (r, &t) in cat.iter().enumerate() {
            for c in 0..d {
                emb[(N_CTX + r) * d + c] = tok[t * d + c] + pos[(N_CTX + r) * d + c];
            }
        }
        let mut prompt: Vec<f64> = Vec::new();
        for i in 1..=self.dims.m {
            if i <= self.cfg.k {
                prompt = self.w(&format!("ctx.p_l{i}")).to_vec();
            }
            let t_len = base_len
                + if prompt.is_empty() {
                    0
                } else {
                    self.cfg.n_prompt
                };
            let mut input = emb.clone();
            input.extend_from_slice(&prompt);
            let out = self.block("base.t", i - 1, &input, t_len, d, self.dims.mlp_hidden);
            let mut e_next = out[..base_len * d].to_vec();
            if self.cfg.k > 0 {
                prompt = out[base_len * d..].to_vec();
            }
            if self.cfg.lora_enabled && i >= 2 {
                let shift = self.lora_shift("l", i, &emb, base_len);
                for (ev, sv) in e_next.iter_mut().zip(&shift) {
                    *ev += sv;
                }
            }
            emb = e_next;
        }
        let normed = self.layer_norm(&emb, self.w("base.t.lnf.g"), self.w("base.t.lnf.b"), d);
        let pooled = &normed[(base_len - 1) * d..base_len * d];
        matmul(pooled, self.w("base.t.proj"), 1, d, d)
    }

    fn vision_branch(&self, image: &Image, f_hat: &[f64]) -> Vec<f64> {
        let d = self.dims.d;
        let np = self.dims.num_patches();
        let raw = self.patchify(image);
        let mut emb = self.affine(
            &raw,
            np,
            "base.v.patch.w",
            "base.v.patch.b",
            self.dims.patch_dim(),
            d,
        );
        let pos = self.w("base.v.pos");
        for (r, row) in emb.chunks_mut(d).enumerate() {
            for c in 0..d {
                row[c] += pos[(1 + r) * d + c];
            }
        }
        let cls_p = self.w("base.v.cls");
        let mut cls: Vec<f64> = (0..d).map(|c| cls_p[c] + pos[c]).collect();
        let mut prompt: Vec<f64> = Vec::new();
        for i in 1..=self.dims.m {
            if i <= self.cfg.k {
                prompt = self.gen_vision_prompt(f_hat, i);
            }
            let t_len = 1
                + np
                + if prompt.is_empty() {
                    0
                } else {
                    self.cfg.n_prompt
                };
            let mut input = cls.clone();
            input.extend_from_slice(&emb);
            input.extend_from_slice(&prompt);
            let out = self.block("base.v", i - 1, &input, t_len, d, self.dims.mlp_hidden);
            cls = out[..d].to_vec();
            let mut e_next = out[d..(1 + np) * d].to_vec();
            if self.cfg.k > 0 {
                prompt = out[(1 + np) * d..].to_vec();
            }
            if self.cfg.lora_enabled && i >= 2 {
                let shift = self.lora_shift("v", i, &emb, np);
                for (ev, sv) in e_next.iter_mut().zip(&shift) {
                    *ev += sv;
                }
            }
            emb = e_next;
        }
        let mut seq = cls;
        seq.extend_from_slice(&emb);
        let normed = self.layer_norm(&seq, self.w("base.v.lnf.g"), self.w("base.v.lnf.b"), d);
        matmul(&normed[..d], self.w("base.v.proj"), 1, d, d)
    }
}

fn micro_setup(seed: u64) -> (EncoderDims, PromptConfig, ParamStore, Image) {
    let dims = EncoderDims {
        d: 4,
        m: 2,
        heads: 2,
        mlp_hidden: 8,
        img: 16,
        patch: 8,
        d_dom: 4,
        vocab: 16,
        max_text_len: 10,
    };
    let cfg = PromptConfig {
        k: 1,
        n_prompt: 2,
        pattern: SlotPattern::AB_DEFAULT,
        quat_enabled: true,
        lora_enabled: true,
        lora_rank: 2,
        tau: 0.07,
    };
    let init = Stream::new("trace-init", seed);
    let mut store = ParamStore::new();
    VisionEncoder::new(dims).init(&mut store, &init.fork("v"));
    TextEncoder::new(dims).init(&mut store, &init.fork("t"));
    DomainEncoder::new(dims, DomainProvenance::SeededRandom).init(&mut store, &init.fork("d"));
    DomainProjection::new(&dims).init(&mut store, &init.fork("p"));
    init_prompt_params(
        &mut store,
        &dims,
        &cfg,
        AlphaInit::SmallRandom,
        &init.fork("q"),
    );
    let mut data = Stream::new("trace-data", seed);
    let image = Image {
        pixels: data.normal_vec(dims.img * dims.img),
    };
    (dims, cfg, store, image)
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol * (1.0 + w.abs()),
            "{what}[{i}]: {g} vs {w}"
        );
    }
}

#[test]
fn branches_match_the_straight_line_trace() {
    for seed in [0u64, 1, 2] {
        let (dims, cfg, store, image) = micro_setup(seed);
        let trace = Trace {
            store: &store,
            dims,
            cfg,
        };

        let vision = VisionEncoder::new(dims);
        let text = TextEncoder::new(dims);
        let mut domain = DomainEncoder::new(dims, DomainProvenance::SeededRandom);
        domain.freeze();
        let proj = DomainProjection::new(&dims);
        let model = PromptModel::new(dims, cfg, &vision, &text, &domain, &proj).unwrap();
        let trainable = BTreeSet::new();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, &trainable);

        let f_d = domain.encode(&mut tape, &mut binder, &image).unwrap();
        let ref_f_d = trace.domain_encode(&image);
        assert_close(tape.data(f_d), &ref_f_d, 1e-9, "domain feature");

        let f_hat = proj.forward(&mut tape, &mut binder, f_d).unwrap();
        let ref_f_hat = trace.project(&ref_f_d);
        assert_close(tape.data(f_hat), &ref_f_hat, 1e-9, "projected feature");

        let t_d = model
            .gen_language_context(&mut tape, &mut binder, f_hat, false, &mut None)
            .unwrap();
        let ref_t_d = trace.gen_context(&ref_f_hat);
        assert_close(tape.data(t_d), &ref_t_d, 1e-9, "language context");

        for class_id in 0..3 {
            let txt = model
                .propagate_language(&mut tape, &mut binder, t_d, class_id)
                .unwrap();
            let ref_txt = trace.language_branch(&ref_t_d, class_id);
            assert_close(tape.data(txt), &ref_txt, 1e-8, "language branch");
        }

        let img_emb = model
            .propagate_vision(&mut tape, &mut binder, &image, f_hat)
            .unwrap();
        let ref_img = trace.vision_branch(&image, &ref_f_hat);
        assert_close(tape.data(img_emb), &ref_img, 1e-8, "vision branch");
    }
}

#[test]
fn depth_zero_matches_unprompted_encoders() {
    let (dims, mut cfg, mut store, image) = micro_setup(9);
    cfg.k = 0;
    cfg.lora_enabled = false;
    // re-register prompt params for the depth-0 config (e_c only)
    let init = Stream::new("trace-init-k0", 9);
    init_prompt_params(&mut store, &dims, &cfg, AlphaInit::Zero, &init);

    let vision = VisionEncoder::new(dims);
    let text = TextEncoder::new(dims);
    let mut domain = DomainEncoder::new(dims, DomainProvenance::SeededRandom);
    domain.freeze();
    let proj = DomainProjection::new(&dims);
    let model = PromptModel::new(dims, cfg, &vision, &text, &domain, &proj).unwrap();
    let trainable = BTreeSet::new();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store, &trainable);

    let f_d = domain.encode(&mut tape, &mut binder, &image).unwrap();
    let f_hat = proj.forward(&mut tape, &mut binder, f_d).unwrap();
    // vision: prompt depth 0 must reproduce the plain encoder bit for bit
    let prompted = model
        .propagate_vision(&mut tape, &mut binder, &image, f_hat)
        .unwrap();
    let plain = vision
        .forward_plain(&mut tape, &mut binder, &image)
        .unwrap();
    assert_eq!(tape.data(prompted), tape.data(plain));
}
