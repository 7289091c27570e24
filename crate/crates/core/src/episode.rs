//! The base-to-novel benchmark harness: pretraining the frozen components,
//! running 16-shot prompt-learning episodes, evaluation, metrics, and run
//! directory output.
//!
//! Everything is seeded. Three independent streams (data, init, noise) are
//! derived per episode so ablation variants see identical data and batch
//! order no matter which parameter groups they instantiate.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    caption_tokens, generate_dataset, split_base_novel, DatasetCfg, Image, Splits, Style,
    SyntheticDataset,
};
use crate::encoder::{
    clip_lite_pretrain, mae_lite_pretrain, DomainEncoder, DomainProjection, DomainProvenance,
    EncoderDims, TextEncoder, VisionEncoder,
};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::params::{Binder, ParamStore};
use crate::prompt::{
    contrastive_loss, init_prompt_params, trainable_names, AlphaInit, PromptConfig, PromptModel,
};
use crate::rng::Stream;
use crate::svg;
use crate::tape::Tape;

/// `2ab / (a + b)` over two accuracy percentages in `(0, 100]`.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a + b == 0.0 {
        return Err(Error::Config("harmonic mean of a zero pair".to_string()));
    }
    if !(0.0..=100.0).contains(&a) || !(0.0..=100.0).contains(&b) {
        return Err(Error::Config(format!(
            "accuracies must be percentages, got ({a}, {b})"
        )));
    }
    Ok(2.0 * a * b / (a + b))
}

fn harmonic_or_zero(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Both conventions for aggregating (base, novel) pairs across runs: the
/// arithmetic mean of per-run HMs, and the HM of the averaged accuracies.
/// They differ in general, so summaries carry both, labeled.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_base: f64,
    pub mean_novel: f64,
    pub mean_of_hms: f64,
    pub hm_of_mean_accs: f64,
}

pub fn aggregate(pairs: &[(f64, f64)]) -> Aggregate {
    let n = pairs.len().max(1) as f64;
    let mean_base = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_novel = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_of_hms = pairs
        .iter()
        .map(|p| harmonic_or_zero(p.0, p.1))
        .sum::<f64>()
        / n;
    Aggregate {
        mean_base,
        mean_novel,
        mean_of_hms,
        hm_of_mean_accs: harmonic_or_zero(mean_base, mean_novel),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    Random,
    Mae,
}

/// Settings for building the frozen components once; episodes reuse them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seed: u64,
    pub dims: EncoderDims,
    pub n_classes: usize,
    /// Natural-style images per class for contrastive pretraining.
    pub per_class: usize,
    pub clip_steps: usize,
    pub clip_batch: usize,
    pub mae_steps: usize,
    pub mae_batch: usize,
    pub mask_ratio: f64,
    /// Domain whose shifted imagery pretrains the domain encoder.
    pub domain_id: u32,
    pub domain_mode: DomainMode,
    pub tau: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            dims: EncoderDims::default(),
            n_classes: 12,
            per_class: 24,
            clip_steps: 260,
            clip_batch: 8,
            mae_steps: 500,
            mae_batch: 4,
            mask_ratio: 0.75,
            domain_id: 1,
            domain_mode: DomainMode::Mae,
            tau: 0.07,
        }
    }
}

/// Frozen artifacts shared by every episode: dual-encoder and domain-encoder
/// weights plus their provenance.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub dims: EncoderDims,
    pub store: ParamStore,
    pub domain_provenance: DomainProvenance,
    pub pretrain_seed: u64,
    pub n_classes: usize,
}

impl Pretrained {
    pub fn frozen_fingerprint(&self) -> String {
        format!(
            "{:016x}{:016x}",
            self.store.fingerprint("base."),
            self.store.fingerprint("dom.")
        )
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "pretrain_seed": self.pretrain_seed,
            "n_classes": self.n_classes,
            "dims": self.dims,
            "domain_provenance": match self.domain_provenance {
                DomainProvenance::SeededRandom => "seeded-random",
                DomainProvenance::MaeLite => "mae-lite",
            },
        })
    }
}

/// Build the frozen base: contrastive dual-encoder pretraining on the
/// natural style, and a domain encoder that is either masked-reconstruction
/// pretrained on shifted imagery or seeded random.
pub fn pretrain(cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.dims.validate()?;
    let natural = generate_dataset(&DatasetCfg {
        seed: cfg.seed,
        n_classes: cfg.n_classes,
        per_class: cfg.per_class,
        style: Style::Natural,
        side: cfg.dims.img,
    })?;
    let captions: Vec<Vec<usize>> = (0..cfg.n_classes).map(caption_tokens).collect();
    let mut store = ParamStore::new();
    let mut clip_rng = Stream::new("pretrain-clip", cfg.seed);
    let sgd = SgdConfig {
        learning_rate: 0.02,
        momentum: 0.9,
    };
    clip_lite_pretrain(
        &mut store,
        cfg.dims,
        &natural.images,
        &captions,
        cfg.clip_steps,
        cfg.clip_batch,
        cfg.tau,
        &sgd,
        &mut clip_rng,
    )?;

    let provenance = match cfg.domain_mode {
        DomainMode::Mae => {
            let domain_corpus = generate_dataset(&DatasetCfg {
                seed: cfg.seed ^ 0x5eed,
                n_classes: cfg.n_classes,
                per_class: 16,
                style: Style::DomainShifted(cfg.domain_id),
                side: cfg.dims.img,
            })?;
            let pool: Vec<Image> = domain_corpus.images.into_iter().flatten().collect();
            let mut mae_rng = Stream::new("pretrain-mae", cfg.seed);
            let mae_sgd = SgdConfig {
                learning_rate: 0.01,
                momentum: 0.9,
            };
            let (enc, _losses) = mae_lite_pretrain(
                &mut store,
                cfg.dims,
                &pool,
                cfg.mask_ratio,
                cfg.mae_steps,
                cfg.mae_batch,
                &mae_sgd,
                &mut mae_rng,
            )?;
            enc.provenance
        }
        DomainMode::Random => {
            let enc = DomainEncoder::new(cfg.dims, DomainProvenance::SeededRandom);
            enc.init(&mut store, &Stream::new("pretrain-dom-random", cfg.seed));
            DomainProvenance::SeededRandom
        }
    };

    Ok(Pretrained {
        dims: cfg.dims,
        store,
        domain_provenance: provenance,
        pretrain_seed: cfg.seed,
        n_classes: cfg.n_classes,
    })
}

/// One benchmark episode's knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Images generated per class; `per_class - shots` of each base class
    /// form its test pool.
    pub per_class: usize,
    pub shots: usize,
    pub epochs: usize,
    pub batch_train: usize,
    pub batch_eval: usize,
    pub domain_id: u32,
    pub prompt: PromptConfig,
    pub sgd: SgdConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            seed: 0,
            n_classes: 12,
            n_base: 8,
            n_novel: 4,
            per_class: 56,
            shots: 16,
            epochs: 10,
            batch_train: 4,
            batch_eval: 24,
            domain_id: 1,
            prompt: PromptConfig::default(),
            sgd: SgdConfig::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, dims: &EncoderDims) -> Result<()> {
        if self.n_base + self.n_novel > self.n_classes {
            return Err(Error::Config(format!(
                "{} base + {} novel classes exceed {}",
                self.n_base, self.n_novel, self.n_classes
            )));
        }
        if self.shots < 1 {
            return Err(Error::Config("shots must be at least 1".to_string()));
        }
        if self.batch_train < 1 || self.batch_eval < 1 {
            return Err(Error::Config("batch sizes must be at least 1".to_string()));
        }
        self.prompt.validate(dims)?;
        self.sgd.validate()
    }
}

/// One metrics row; epoch 0 is the pre-training state (zero-shot accuracies
/// of the frozen encoders, loss of the just-initialized prompt model).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub hm: f64,
    pub mean_cos_sim: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZeroShot {
    pub acc_base: f64,
    pub acc_novel: f64,
    pub hm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub config: EpisodeConfig,
    pub acc_base: f64,
    pub acc_novel: f64,
    pub hm: f64,
    pub zero_shot: ZeroShot,
    pub rows: Vec<EpochRow>,
    /// Per epoch, per quaternion layer (language first, then vision 1..k).
    pub orth_per_layer: Vec<Vec<f64>>,
    pub wall_clock_secs: f64,
    pub frozen_fingerprint_before: String,
    pub frozen_fingerprint_after: String,
}

pub struct EpisodeOutcome {
    pub store: ParamStore,
    pub report: EpisodeReport,
    pub splits: Splits,
}

/// The frozen-component wrappers an episode forwards through.
pub struct ModelBundle {
    pub dims: EncoderDims,
    pub pcfg: PromptConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub domain: DomainEncoder,
    pub proj: DomainProjection,
}

impl ModelBundle {
    pub fn new(dims: EncoderDims, pcfg: PromptConfig, provenance: DomainProvenance) -> Self {
        let mut domain = DomainEncoder::new(dims, provenance);
        domain.freeze();
        ModelBundle {
            dims,
            pcfg,
            vision: VisionEncoder::new(dims),
            text: TextEncoder::new(dims),
            domain,
            proj: DomainProjection::new(&dims),
        }
    }

    pub fn model(&self) -> Result<PromptModel<'_>> {
        PromptModel::new(
            self.dims,
            self.pcfg,
            &self.vision,
            &self.text,
            &self.domain,
            &self.proj,
        )
    }
}

/// Top-1 accuracy of the prompted model over one split, batched to bound
/// tape size. Candidates are the split's own class list.
pub fn evaluate_split(
    store: &ParamStore,
    bundle: &ModelBundle,
    items: &[(usize, Image)],
    candidates: &[usize],
    batch_eval: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("evaluation split is empty".to_string()));
    }
    let model = bundle.model()?;
    let trainable = std::collections::BTreeSet::new();
    let index_of: BTreeMap<usize, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut correct = 0usize;
    for chunk in items.chunks(batch_eval) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        for (class_id, image) in chunk {
            let out =
                model.forward_image(&mut tape, &mut binder, image, candidates, false, &mut None)?;
            let probs = tape.data(out.probs);
            let pred = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == index_of[class_id] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / items.len() as f64)
}

/// Zero-shot accuracy of the frozen dual encoder alone: plain template
/// captions, no prompts, no adapters.
pub fn zero_shot_split(
    store: &ParamStore,
    dims: &EncoderDims,
    items: &[(usize, Image)],
    candidates: &[usize],
    tau: f64,
    batch_eval: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("evaluation split is empty".to_string()));
    }
    let vision = VisionEncoder::new(*dims);
    let text = TextEncoder::new(*dims);
    let trainable = std::collections::BTreeSet::new();
    let index_of: BTreeMap<usize, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let mut correct = 0usize;
    for chunk in items.chunks(batch_eval) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let mut txt_embs = Vec::with_capacity(candidates.len());
        for &c in candidates {
            txt_embs.push(text.forward_plain(&mut tape, &mut binder, &caption_tokens(c))?);
        }
        let txt = tape.concat_rows(&txt_embs)?;
        for (class_id, image) in chunk {
            let img = vision.forward_plain(&mut tape, &mut binder, image)?;
            let img_rows = tape.broadcast_rows(img, candidates.len())?;
            let sims = tape.cosine_rows(img_rows, txt)?;
            let sims = tape.reshape(sims, vec![1, candidates.len()])?;
            let scaled = tape.scale(sims, 1.0 / tau);
            let probs = tape.softmax_rows(scaled)?;
            let row = tape.data(probs);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == index_of[class_id] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / items.len() as f64)
}

/// Per-quaternion-layer cosine between the context-side and domain-side slot
/// inputs, averaged over a probe batch. Undefined (zero-norm) pairs are
/// excluded from the mean.
pub fn track_orthogonality(
    store: &ParamStore,
    bundle: &ModelBundle,
    batch: &[(usize, Image)],
) -> Result<Vec<f64>> {
    let trainable = std::collections::BTreeSet::new();
    let layers = 1 + bundle.pcfg.k;
    let mut sums = vec![0.0; layers];
    let mut counts = vec![0usize; layers];
    let mut tape = Tape::new();
    let mut binder = Binder::new(store, &trainable);
    for (_, image) in batch {
        let f_d = bundle.domain.encode(&mut tape, &mut binder, image)?;
        let f_hat = bundle.proj.forward(&mut tape, &mut binder, f_d)?;
        let f_vals = tape.data(f_hat).to_vec();
        let mut per_layer = Vec::with_capacity(layers);
        let e_c = binder.bind(&mut tape, "ctx.e_c")?;
        per_layer.push(crate::prompt::mean_row_cosine(
            tape.data(e_c),
            bundle.dims.d,
            &f_vals,
        ));
        for i in 1..=bundle.pcfg.k {
            let p_l = binder.bind(&mut tape, &format!("ctx.p_l{i}"))?;
            per_layer.push(crate::prompt::mean_row_cosine(
                tape.data(p_l),
                bundle.dims.d,
                &f_vals,
            ));
        }
        for (l, &c) in per_layer.iter().enumerate() {
            if c.is_finite() {
                sums[l] += c;
                counts[l] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect())
}

fn mean_finite(xs: &[f64]) -> f64 {
    let fin: Vec<f64> = xs.iter().cloned().filter(|v| v.is_finite()).collect();
    if fin.is_empty() {
        f64::NAN
    } else {
        fin.iter().sum::<f64>() / fin.len() as f64
    }
}

/// Run one 16-shot base-to-novel episode on shifted-domain data. Only
/// prompt-side parameters update; the frozen fingerprint proves it.
pub fn train_episode(pre: &Pretrained, cfg: &EpisodeConfig) -> Result<EpisodeOutcome> {
    let start = Instant::now();
    cfg.validate(&pre.dims)?;
    if cfg.n_classes > pre.n_classes {
        return Err(Error::Config(format!(
            "episode wants {} classes but the base was pretrained on {}",
            cfg.n_classes, pre.n_classes
        )));
    }
    if !pre.store.contains("base.v.patch.w") || !pre.store.contains("dom.patch.w") {
        return Err(Error::Config(
            "missing frozen checkpoints: pretrain the base and domain encoders first".to_string(),
        ));
    }

    let dataset = generate_dataset(&DatasetCfg {
        seed: cfg.seed,
        n_classes: cfg.n_classes,
        per_class: cfg.per_class,
        style: Style::DomainShifted(cfg.domain_id),
        side: pre.dims.img,
    })?;
    let mut split_rng = Stream::new("split", cfg.seed);
    let splits = split_base_novel(&dataset, cfg.n_base, cfg.n_novel, cfg.shots, &mut split_rng)?;

    let mut store = pre.store.clone();
    let init = Stream::new("episode-init", cfg.seed);
    init_prompt_params(&mut store, &pre.dims, &cfg.prompt, AlphaInit::Zero, &init);
    let proj = DomainProjection::new(&pre.dims);
    proj.init(&mut store, &init);

    let bundle = ModelBundle::new(pre.dims, cfg.prompt, pre.domain_provenance);
    let trainable = trainable_names(&store, &cfg.prompt);
    let names: Vec<String> = trainable.iter().cloned().collect();
    let fingerprint_before = pre.frozen_fingerprint();

    let zs_base = zero_shot_split(
        &store,
        &pre.dims,
        &splits.base_test,
        &splits.base_classes,
        cfg.prompt.tau,
        cfg.batch_eval,
    )?;
    let zs_novel = zero_shot_split(
        &store,
        &pre.dims,
        &splits.novel_test,
        &splits.novel_classes,
        cfg.prompt.tau,
        cfg.batch_eval,
    )?;
    let zero_shot = ZeroShot {
        acc_base: zs_base,
        acc_novel: zs_novel,
        hm: harmonic_or_zero(zs_base, zs_novel),
    };

    let probe: Vec<(usize, Image)> = splits
        .base_train
        .iter()
        .take(cfg.batch_eval.min(splits.base_train.len()))
        .cloned()
        .collect();

    // Epoch 0: loss of the initialized model (no updates), zero-shot
    // accuracies, and the initial orthogonality probe.
    let init_loss = epoch_loss_no_update(&store, &bundle, &splits, cfg)?;
    let orth0 = track_orthogonality(&store, &bundle, &probe)?;
    let mut rows = vec![EpochRow {
        epoch: 0,
        loss: init_loss,
        acc_base: zs_base,
        acc_novel: zs_novel,
        hm: zero_shot.hm,
        mean_cos_sim: mean_finite(&orth0),
    }];
    let mut orth_per_layer = vec![orth0];

    let mut order_rng = Stream::new("order", cfg.seed);
    let mut noise_rng = Stream::new("noise", cfg.seed);
    let mut state = SgdState::new();
    let model = bundle.model()?;

    for epoch in 1..=cfg.epochs {
        let mut idx: Vec<usize> = (0..splits.base_train.len()).collect();
        order_rng.shuffle(&mut idx);
        let mut epoch_losses = Vec::new();
        for batch in idx.chunks(cfg.batch_train) {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store, &trainable);
            let mut prob_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (class_id, image) = &splits.base_train[i];
                let mut noise = Some(&mut noise_rng);
                let out = model.forward_image(
                    &mut tape,
                    &mut binder,
                    image,
                    &splits.base_classes,
                    true,
                    &mut noise,
                )?;
                prob_rows.push(out.probs);
                labels.push(
                    splits
                        .base_classes
                        .iter()
                        .position(|c| c == class_id)
                        .unwrap(),
                );
            }
            let probs = tape.concat_rows(&prob_rows)?;
            let loss = contrastive_loss(&mut tape, probs, &labels)?;
            epoch_losses.push(tape.value(loss));
            tape.backward(loss)?;
            let grads: BTreeMap<String, Vec<f64>> = tape.named_grads().into_iter().collect();
            drop(binder);
            sgd_step(&mut store, &grads, &names, &cfg.sgd, &mut state)?;
        }
        let loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;

        let acc_base = evaluate_split(
            &store,
            &bundle,
            &splits.base_test,
            &splits.base_classes,
            cfg.batch_eval,
        )?;
        let acc_novel = evaluate_split(
            &store,
            &bundle,
            &splits.novel_test,
            &splits.novel_classes,
            cfg.batch_eval,
        )?;
        let orth = track_orthogonality(&store, &bundle, &probe)?;
        rows.push(EpochRow {
            epoch,
            loss,
            acc_base,
            acc_novel,
            hm: harmonic_or_zero(acc_base, acc_novel),
            mean_cos_sim: mean_finite(&orth),
        });
        orth_per_layer.push(orth);
    }

    let last = *rows.last().unwrap();
    let fingerprint_after = format!(
        "{:016x}{:016x}",
        store.fingerprint("base."),
        store.fingerprint("dom.")
    );
    let report = EpisodeReport {
        config: cfg.clone(),
        acc_base: last.acc_base,
        acc_novel: last.acc_novel,
        hm: last.hm,
        zero_shot,
        rows,
        orth_per_layer,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        frozen_fingerprint_before: fingerprint_before,
        frozen_fingerprint_after: fingerprint_after,
    };
    Ok(EpisodeOutcome {
        store,
        report,
        splits,
    })
}

fn epoch_loss_no_update(
    store: &ParamStore,
    bundle: &ModelBundle,
    splits: &Splits,
    cfg: &EpisodeConfig,
) -> Result<f64> {
    let model = bundle.model()?;
    let trainable = std::collections::BTreeSet::new();
    let mut losses = Vec::new();
    for chunk in splits.base_train.chunks(cfg.batch_eval) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store, &trainable);
        let mut prob_rows = Vec::new();
        let mut labels = Vec::new();
        for (class_id, image) in chunk {
            let out = model.forward_image(
                &mut tape,
                &mut binder,
                image,
                &splits.base_classes,
                false,
                &mut None,
            )?;
            prob_rows.push(out.probs);
            labels.push(
                splits
                    .base_classes
                    .iter()
                    .position(|c| c == class_id)
                    .unwrap(),
            );
        }
        let probs = tape.concat_rows(&prob_rows)?;
        let loss = contrastive_loss(&mut tape, probs, &labels)?;
        losses.push(tape.value(loss) * chunk.len() as f64);
    }
    Ok(losses.iter().sum::<f64>() / splits.base_train.len() as f64)
}

/// Evaluate a trained episode on other domains' base splits. Same classes,
/// same split derivation, different fixed domain transform.
pub fn cross_dataset_eval(
    pre: &Pretrained,
    store: &ParamStore,
    cfg: &EpisodeConfig,
    target_domains: &[u32],
) -> Result<Vec<(u32, f64)>> {
    let bundle = ModelBundle::new(pre.dims, cfg.prompt, pre.domain_provenance);
    let mut out = Vec::with_capacity(target_domains.len());
    for &dom in target_domains {
        let dataset = generate_dataset(&DatasetCfg {
            seed: cfg.seed,
            n_classes: cfg.n_classes,
            per_class: cfg.per_class,
            style: Style::DomainShifted(dom),
            side: pre.dims.img,
        })?;
        let mut split_rng = Stream::new("split", cfg.seed);
        let splits =
            split_base_novel(&dataset, cfg.n_base, cfg.n_novel, cfg.shots, &mut split_rng)?;
        let acc = evaluate_split(
            store,
            &bundle,
            &splits.base_test,
            &splits.base_classes,
            cfg.batch_eval,
        )?;
        out.push((dom, acc));
    }
    Ok(out)
}

/// Zero-shot counterpart of [`cross_dataset_eval`] for the frozen base.
pub fn cross_dataset_zero_shot(
    pre: &Pretrained,
    cfg: &EpisodeConfig,
    target_domains: &[u32],
) -> Result<Vec<(u32, f64)>> {
    let mut out = Vec::with_capacity(target_domains.len());
    for &dom in target_domains {
        let dataset = generate_dataset(&DatasetCfg {
            seed: cfg.seed,
            n_classes: cfg.n_classes,
            per_class: cfg.per_class,
            style: Style::DomainShifted(dom),
            side: pre.dims.img,
        })?;
        let mut split_rng = Stream::new("split", cfg.seed);
        let splits =
            split_base_novel(&dataset, cfg.n_base, cfg.n_novel, cfg.shots, &mut split_rng)?;
        let acc = zero_shot_split(
            &pre.store,
            &pre.dims,
            &splits.base_test,
            &splits.base_classes,
            cfg.prompt.tau,
            cfg.batch_eval,
        )?;
        out.push((dom, acc));
    }
    Ok(out)
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".to_string()
    }
}

/// The `metrics.csv` bytes: '.' decimals, LF endings, one row per epoch
/// including epoch 0.
pub fn metrics_csv(report: &EpisodeReport) -> String {
    let mut out = String::from("epoch,loss,acc_base,acc_novel,hm,mean_cos_sim\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            fmt_metric(r.loss),
            fmt_metric(r.acc_base),
            fmt_metric(r.acc_novel),
            fmt_metric(r.hm),
            fmt_metric(r.mean_cos_sim),
        ));
    }
    out
}

/// Write a run directory: config snapshot, metrics, report, checkpoints,
/// and SVG curves.
pub fn write_run_dir(dir: &Path, pre: &Pretrained, outcome: &EpisodeOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("config.snapshot"),
        serde_json::to_string_pretty(&outcome.report.config)?,
    )?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.report))?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    checkpoint::save(&dir.join("checkpoints/model"), &outcome.store, pre.meta())?;

    let losses: Vec<f64> = outcome.report.rows.iter().map(|r| r.loss).collect();
    let hms: Vec<f64> = outcome.report.rows.iter().map(|r| r.hm).collect();
    let cos: Vec<f64> = outcome.report.rows.iter().map(|r| r.mean_cos_sim).collect();
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    std::fs::write(
        curves.join("loss.svg"),
        svg::line_chart(
            "training loss / hm by epoch",
            &[("loss", &losses), ("hm", &hms)],
        ),
    )?;
    std::fs::write(
        curves.join("orthogonality.svg"),
        svg::line_chart("mean cross-modal cosine by epoch", &[("mean_cos", &cos)]),
    )?;
    Ok(())
}

pub fn dataset_for(cfg: &EpisodeConfig, dims: &EncoderDims) -> Result<SyntheticDataset> {
    generate_dataset(&DatasetCfg {
        seed: cfg.seed,
        n_classes: cfg.n_classes,
        per_class: cfg.per_class,
        style: Style::DomainShifted(cfg.domain_id),
        side: dims.img,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_reproduces_reported_pairs() {
        // Frozen reference pairs with their published harmonic means.
        assert!((harmonic_mean(89.00, 60.37).unwrap() - 71.94).abs() < 0.01);
        assert!((harmonic_mean(97.90, 75.23).unwrap() - 85.08).abs() < 0.01);
        assert!((harmonic_mean(50.60, 51.20).unwrap() - 50.89).abs() < 0.02);
    }

    #[test]
    fn harmonic_mean_rejects_zero_pair_and_out_of_range() {
        assert!(harmonic_mean(0.0, 0.0).is_err());
        assert!(harmonic_mean(-5.0, 50.0).is_err());
        assert!(harmonic_mean(50.0, 120.0).is_err());
    }

    #[test]
    fn hm_sits_below_geometric_and_arithmetic_means() {
        let mut s = Stream::new("hm-bounds", 0);
        for _ in 0..500 {
            let a = s.uniform(0.5, 100.0);
            let b = s.uniform(0.5, 100.0);
            let hm = harmonic_mean(a, b).unwrap();
            let gm = (a * b).sqrt();
            let am = 0.5 * (a + b);
            assert!(a.min(b) - 1e-9 <= hm && hm <= a.max(b) + 1e-9);
            assert!(hm <= gm + 1e-9 && gm <= am + 1e-9);
        }
    }

    #[test]
    fn aggregate_reports_both_conventions() {
        let pairs = [(90.0, 60.0), (50.0, 50.0)];
        let agg = aggregate(&pairs);
        assert!((agg.mean_base - 70.0).abs() < 1e-12);
        assert!((agg.mean_novel - 55.0).abs() < 1e-12);
        let hm1 = 2.0 * 90.0 * 60.0 / 150.0;
        assert!((agg.mean_of_hms - (hm1 + 50.0) / 2.0).abs() < 1e-12);
        assert!((agg.hm_of_mean_accs - 2.0 * 70.0 * 55.0 / 125.0).abs() < 1e-12);
        // the two labeled values genuinely differ
        assert!((agg.mean_of_hms - agg.hm_of_mean_accs).abs() > 0.1);
    }

    #[test]
    fn metrics_csv_uses_lf_and_dot_decimals() {
        let report = EpisodeReport {
            config: EpisodeConfig::default(),
            acc_base: 50.0,
            acc_novel: 25.0,
            hm: 33.333333,
            zero_shot: ZeroShot {
                acc_base: 10.0,
                acc_novel: 10.0,
                hm: 10.0,
            },
            rows: vec![EpochRow {
                epoch: 0,
                loss: 1.5,
                acc_base: 10.0,
                acc_novel: 10.0,
                hm: 10.0,
                mean_cos_sim: f64::NAN,
            }],
            orth_per_layer: vec![vec![f64::NAN]],
            wall_clock_secs: 0.0,
            frozen_fingerprint_before: String::new(),
            frozen_fingerprint_after: String::new(),
        };
        let csv = metrics_csv(&report);
        assert!(csv.starts_with("epoch,loss,acc_base,acc_novel,hm,mean_cos_sim\n"));
        assert!(csv.contains("1.500000"));
        assert!(csv.contains(",nan\n"));
        assert!(!csv.contains('\r'));
    }
}
