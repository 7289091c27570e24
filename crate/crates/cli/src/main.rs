//! Command-line driver: pretraining, episodes, evaluation, verification
//! oracles, and report printing.
//!
//! Exit codes: 0 success, 1 validation failure (bad flags, failed checks),
//! 2 I/O or checkpoint trouble.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dprompt_core::checkpoint;
use dprompt_core::encoder::{DomainProvenance, EncoderDims};
use dprompt_core::episode::{
    cross_dataset_eval, cross_dataset_zero_shot, dataset_for, evaluate_split, metrics_csv,
    pretrain, train_episode, write_run_dir, DomainMode, EpisodeConfig, EpisodeReport, ModelBundle,
    PretrainConfig, Pretrained,
};
use dprompt_core::gradcheck::{MicroModel, GRAD_TOL};
use dprompt_core::linalg::low_rank_oracle;
use dprompt_core::optim::SgdConfig;
use dprompt_core::prompt::PromptConfig;
use dprompt_core::quat::{hamilton_matrix_oracle, homomorphism_norm_oracle};
use dprompt_core::{Error, SlotPattern};

#[derive(Parser)]
#[command(
    name = "dprompt",
    about = "Domain prompt learning over a toy frozen dual encoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and checkpoint the frozen dual encoder and domain encoder.
    Pretrain(PretrainArgs),
    /// Run one base-to-novel prompt-learning episode and write a run dir.
    Train(TrainArgs),
    /// Re-evaluate a finished run directory on its own splits.
    Eval(EvalArgs),
    /// Train on one domain, evaluate across others.
    Crosseval(CrossArgs),
    /// Finite-difference check of every trainable group on a micro model.
    Gradcheck,
    /// Algebraic verification oracles (Hamilton, homomorphism, low rank).
    Oracles,
    /// Print the summary of a finished run directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DomainModeArg {
    Random,
    Mae,
}

impl From<DomainModeArg> for DomainMode {
    fn from(v: DomainModeArg) -> Self {
        match v {
            DomainModeArg::Random => DomainMode::Random,
            DomainModeArg::Mae => DomainMode::Mae,
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = DomainModeArg::Mae)]
    domain_encoder: DomainModeArg,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long)]
    clip_steps: Option<usize>,
    #[arg(long)]
    mae_steps: Option<usize>,
    /// Domain whose shifted imagery pretrains the domain encoder.
    #[arg(long, default_value_t = 1)]
    domain: u32,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// Prompt depth k.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Quaternion slot pattern, e.g. "[a,b,*,*]" or "ab**".
    #[arg(long, default_value = "[a,b,*,*]")]
    pattern: String,
    /// Disable the low-rank adapters.
    #[arg(long)]
    no_lora: bool,
    /// Disable the quaternion mixing layers.
    #[arg(long)]
    no_quat: bool,
    #[arg(long, value_enum, default_value_t = DomainModeArg::Mae)]
    domain_encoder: DomainModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Directory holding a pretrained checkpoint (from `pretrain --out`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    base: usize,
    #[arg(long, default_value_t = 4)]
    novel: usize,
    #[arg(long, default_value_t = 56)]
    per_class: usize,
    #[arg(long, default_value_t = 4)]
    batch_train: usize,
    #[arg(long, default_value_t = 24)]
    batch_eval: usize,
    #[arg(long, default_value_t = 1)]
    domain: u32,
    #[arg(long, default_value_t = 0)]
    pretrain_seed: u64,
    #[arg(long)]
    clip_steps: Option<usize>,
    #[arg(long)]
    mae_steps: Option<usize>,
    #[arg(long, default_value_t = 3.5e-3)]
    lr: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// A run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct CrossArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated target domain ids, e.g. "1,2,3".
    #[arg(long, default_value = "1,2,3")]
    domains: String,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage text; everything wrong with the
            // invocation is a validation failure.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Crosseval(args) => cmd_crosseval(args),
        Cmd::Gradcheck => cmd_gradcheck(),
        Cmd::Oracles => cmd_oracles(),
        Cmd::Report(args) => cmd_report(args),
    }
}

fn pretrain_cfg(
    seed: u64,
    classes: usize,
    domain: u32,
    mode: DomainMode,
    clip_steps: Option<usize>,
    mae_steps: Option<usize>,
) -> PretrainConfig {
    let mut cfg = PretrainConfig {
        seed,
        n_classes: classes,
        domain_id: domain,
        domain_mode: mode,
        ..PretrainConfig::default()
    };
    if let Some(s) = clip_steps {
        cfg.clip_steps = s;
    }
    if let Some(s) = mae_steps {
        cfg.mae_steps = s;
    }
    cfg
}

fn save_pretrained(dir: &Path, pre: &Pretrained) -> Result<(), Error> {
    checkpoint::save(&dir.join("pretrained"), &pre.store, pre.meta())
}

fn load_pretrained(dir: &Path) -> Result<Pretrained, Error> {
    let candidates = [dir.join("pretrained"), dir.to_path_buf()];
    let found = candidates
        .iter()
        .find(|p| p.join("manifest.json").exists())
        .ok_or_else(|| {
            Error::Checkpoint(format!("no pretrained checkpoint under {}", dir.display()))
        })?;
    let (store, meta) = checkpoint::load(found)?;
    let dims: EncoderDims = serde_json::from_value(meta["dims"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad dims in manifest meta: {e}")))?;
    let provenance = match meta["domain_provenance"].as_str() {
        Some("mae-lite") => DomainProvenance::MaeLite,
        Some("seeded-random") => DomainProvenance::SeededRandom,
        other => {
            return Err(Error::Checkpoint(format!(
                "bad domain provenance in manifest meta: {other:?}"
            )))
        }
    };
    Ok(Pretrained {
        dims,
        store,
        domain_provenance: provenance,
        pretrain_seed: meta["pretrain_seed"].as_u64().unwrap_or(0),
        n_classes: meta["n_classes"].as_u64().unwrap_or(0) as usize,
    })
}

fn cmd_pretrain(args: PretrainArgs) -> Result<ExitCode, Error> {
    let cfg = pretrain_cfg(
        args.seed,
        args.classes,
        args.domain,
        args.domain_encoder.into(),
        args.clip_steps,
        args.mae_steps,
    );
    let pre = pretrain(&cfg)?;
    save_pretrained(&args.out, &pre)?;
    println!(
        "pretrained {} classes (domain encoder: {:?}) -> {}",
        cfg.n_classes,
        pre.domain_provenance,
        args.out.join("pretrained").display()
    );
    println!("frozen fingerprint {}", pre.frozen_fingerprint());
    Ok(ExitCode::SUCCESS)
}

fn resolve_pretrained(args: &TrainArgs) -> Result<Pretrained, Error> {
    let want = match args.domain_encoder {
        DomainModeArg::Mae => DomainProvenance::MaeLite,
        DomainModeArg::Random => DomainProvenance::SeededRandom,
    };
    if let Some(ckpt) = &args.ckpt {
        let pre = load_pretrained(ckpt)?;
        if pre.domain_provenance != want {
            return Err(Error::Config(format!(
                "checkpoint domain encoder is {:?} but --domain-encoder asked for {:?}",
                pre.domain_provenance, want
            )));
        }
        return Ok(pre);
    }
    let local = args.out.join("pretrained");
    if local.join("manifest.json").exists() {
        let pre = load_pretrained(&args.out)?;
        if pre.domain_provenance == want {
            return Ok(pre);
        }
    }
    let cfg = pretrain_cfg(
        args.pretrain_seed,
        args.classes,
        args.domain,
        args.domain_encoder.into(),
        args.clip_steps,
        args.mae_steps,
    );
    let pre = pretrain(&cfg)?;
    save_pretrained(&args.out, &pre)?;
    Ok(pre)
}

fn episode_cfg(args: &TrainArgs) -> Result<EpisodeConfig, Error> {
    let pattern: SlotPattern = args.pattern.parse()?;
    Ok(EpisodeConfig {
        seed: args.seed,
        n_classes: args.classes,
        n_base: args.base,
        n_novel: args.novel,
        per_class: args.per_class,
        shots: args.shots,
        epochs: args.epochs,
        batch_train: args.batch_train,
        batch_eval: args.batch_eval,
        domain_id: args.domain,
        prompt: PromptConfig {
            k: args.depth,
            pattern,
            quat_enabled: !args.no_quat,
            lora_enabled: !args.no_lora,
            ..PromptConfig::default()
        },
        sgd: SgdConfig {
            learning_rate: args.lr,
            momentum: 0.9,
        },
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, Error> {
    let pre = resolve_pretrained(&args)?;
    let cfg = episode_cfg(&args)?;
    let outcome = train_episode(&pre, &cfg)?;
    write_run_dir(&args.out, &pre, &outcome)?;
    let r = &outcome.report;
    println!(
        "zero-shot  base {:6.2}  novel {:6.2}  hm {:6.2}",
        r.zero_shot.acc_base, r.zero_shot.acc_novel, r.zero_shot.hm
    );
    println!(
        "final      base {:6.2}  novel {:6.2}  hm {:6.2}",
        r.acc_base, r.acc_novel, r.hm
    );
    println!(
        "trained {} epochs in {:.1}s -> {}",
        cfg.epochs,
        r.wall_clock_secs,
        args.out.display()
    );
    if r.frozen_fingerprint_before != r.frozen_fingerprint_after {
        return Err(Error::Config(
            "frozen weights changed during the episode".to_string(),
        ));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let cfg: EpisodeConfig =
        serde_json::from_str(&std::fs::read_to_string(args.run.join("config.snapshot"))?)?;
    let (store, meta) = checkpoint::load(&args.run.join("checkpoints/model"))?;
    let dims: EncoderDims = serde_json::from_value(meta["dims"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad dims in manifest meta: {e}")))?;
    let provenance = match meta["domain_provenance"].as_str() {
        Some("mae-lite") => DomainProvenance::MaeLite,
        _ => DomainProvenance::SeededRandom,
    };
    let dataset = dataset_for(&cfg, &dims)?;
    let mut split_rng = dprompt_core::rng::Stream::new("split", cfg.seed);
    let splits = dprompt_core::data::split_base_novel(
        &dataset,
        cfg.n_base,
        cfg.n_novel,
        cfg.shots,
        &mut split_rng,
    )?;
    let bundle = ModelBundle::new(dims, cfg.prompt, provenance);
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
    let hm = if acc_base + acc_novel > 0.0 {
        2.0 * acc_base * acc_novel / (acc_base + acc_novel)
    } else {
        0.0
    };
    println!("base {acc_base:6.2}  novel {acc_novel:6.2}  hm {hm:6.2}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_crosseval(args: CrossArgs) -> Result<ExitCode, Error> {
    let domains: Vec<u32> = args
        .domains
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad domain id `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let pre = resolve_pretrained(&args.train)?;
    let cfg = episode_cfg(&args.train)?;
    let outcome = train_episode(&pre, &cfg)?;
    write_run_dir(&args.train.out, &pre, &outcome)?;
    let prompted = cross_dataset_eval(&pre, &outcome.store, &cfg, &domains)?;
    let zero = cross_dataset_zero_shot(&pre, &cfg, &domains)?;
    println!("domain  prompted  zero-shot");
    for ((dom, acc), (_, z)) in prompted.iter().zip(&zero) {
        let marker = if *dom == cfg.domain_id {
            " (source)"
        } else {
            ""
        };
        println!("{dom:>6}  {acc:8.2}  {z:9.2}{marker}");
    }
    let mean_p = prompted.iter().map(|&(_, a)| a).sum::<f64>() / prompted.len().max(1) as f64;
    let mean_z = zero.iter().map(|&(_, a)| a).sum::<f64>() / zero.len().max(1) as f64;
    println!("mean    {mean_p:8.2}  {mean_z:9.2}");
    let summary = serde_json::json!({
        "source_domain": cfg.domain_id,
        "prompted": prompted,
        "zero_shot": zero,
        "mean_prompted": mean_p,
        "mean_zero_shot": mean_z,
    });
    std::fs::write(
        args.train.out.join("crosseval.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck() -> Result<ExitCode, Error> {
    let micro = MicroModel::new(0);
    let results = micro.gradient_suite()?;
    let mut worst: f64 = 0.0;
    for (group, err) in &results {
        println!("{group:<12} max rel err {err:.3e}");
        worst = worst.max(*err);
    }
    println!("worst {worst:.3e} (tolerance {GRAD_TOL:.0e})");
    if worst >= GRAD_TOL {
        println!("FAIL");
        return Ok(ExitCode::from(1));
    }
    println!("PASS");
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracles() -> Result<ExitCode, Error> {
    let mut ok = true;
    let hamilton = hamilton_matrix_oracle(1000, 0);
    let pass = hamilton < 1e-12;
    ok &= pass;
    println!(
        "hamilton vs matrix route (1000 pairs): max abs err {hamilton:.3e} ... {}",
        if pass { "PASS" } else { "FAIL" }
    );
    let (hom, norm) = homomorphism_norm_oracle(1000, 0);
    let pass = hom < 1e-10 && norm < 1e-10;
    ok &= pass;
    println!(
        "homomorphism M(a)M(b)=M(ab) and |ab|=|a||b|: {hom:.3e} / {norm:.3e} ... {}",
        if pass { "PASS" } else { "FAIL" }
    );
    let trailing = low_rank_oracle(16, 3, 25, 0);
    let pass = trailing < 1e-10;
    ok &= pass;
    println!(
        "low-rank trailing singular values: max {trailing:.3e} ... {}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode, Error> {
    let report: EpisodeReport =
        serde_json::from_str(&std::fs::read_to_string(args.run.join("report.json"))?)?;
    println!("run        {}", args.run.display());
    println!(
        "config     seed {} epochs {} shots {} depth {} pattern {} lora {} quat {}",
        report.config.seed,
        report.config.epochs,
        report.config.shots,
        report.config.prompt.k,
        report.config.prompt.pattern,
        report.config.prompt.lora_enabled,
        report.config.prompt.quat_enabled,
    );
    println!(
        "zero-shot  base {:6.2}  novel {:6.2}  hm {:6.2}",
        report.zero_shot.acc_base, report.zero_shot.acc_novel, report.zero_shot.hm
    );
    println!("epoch  loss      acc_base  acc_novel  hm       mean_cos");
    for r in &report.rows {
        println!(
            "{:>5}  {:<8.4}  {:>8.2}  {:>9.2}  {:>7.2}  {:>8.4}",
            r.epoch, r.loss, r.acc_base, r.acc_novel, r.hm, r.mean_cos_sim
        );
    }
    println!(
        "final      base {:6.2}  novel {:6.2}  hm {:6.2}  ({:.1}s)",
        report.acc_base, report.acc_novel, report.hm, report.wall_clock_secs
    );
    debug_assert_eq!(metrics_csv(&report).lines().count(), report.rows.len() + 1);
    Ok(ExitCode::SUCCESS)
}
