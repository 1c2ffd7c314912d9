use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use dcar_core::backbone::checkpoint::Checkpoint;
use dcar_core::backbone::{BackboneConfig, BackboneParams};
use dcar_core::config::RunConfig;
use dcar_core::dataset::{export_ppm, Split};
use dcar_core::experiment::{
    ablate_lambda, ablate_shots, ablate_toggles, ablation_svg, csv_preamble, read_ablation_rows, run_arm,
    write_ablation_rows, write_file, ArmOutcome, Prepared, ABLATION_CSV_HEADER,
};
use dcar_core::retrieval::{write_report_rows, REPORT_CSV_HEADER, DEFAULT_KS};
use dcar_core::reweight::{token_weights, write_weight_rows, WEIGHTS_CSV_HEADER};
use dcar_core::training::{
    evaluate, grad_check, pretrain_backbone, write_metrics_rows, AdaptState, METRICS_CSV_HEADER,
};
use dcar_core::{Error, Result};

const BACKBONE_CKPT: &str = "backbone.ckpt";
const ADAPTED_CKPT: &str = "adapted.ckpt";

#[derive(Parser)]
#[command(name = "dcar", version, about = "Dual prompt learning for image-text retrieval on a toy dual encoder")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the taxonomy, manifest and vocabulary.
    GenData {
        /// Also write every image as PPM into this directory.
        #[arg(long)]
        ppm: Option<PathBuf>,
    },
    /// Pretrain the backbone on the base split and freeze it.
    Pretrain,
    /// Adapt prompts on the few-shot split and report test retrieval.
    Train,
    /// Test retrieval with the adapted checkpoint (or zero-shot).
    Eval {
        /// Ignore any adapted checkpoint.
        #[arg(long)]
        zero_shot: bool,
        /// Also write per-token weights for the evaluated captions.
        #[arg(long)]
        dump_weights: bool,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Finite-difference check of the training gradients.
    GradCheck,
    /// Run the ablation sweeps over the configured seeds.
    Ablate {
        #[arg(long, value_enum, default_value_t = Group::All)]
        group: Group,
    },
    /// Render an ablation CSV as an SVG chart.
    Report {
        /// Defaults to `<out>/ablation.csv`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Group {
    Toggles,
    Lambda,
    Shots,
    All,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `p` itself but never its ancestors, so a mistyped path fails
/// instead of scattering directories.
fn ensure_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        return Ok(());
    }
    match p.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => Err(Error::MissingInput {
            path: parent.to_path_buf(),
            reason: "output directory does not exist".into(),
        }),
        _ => {
            fs::create_dir(p)?;
            Ok(())
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<Prepared> {
    let data = Prepared::load(&cfg.dataset_dir).map_err(|e| match e {
        Error::Io(_) | Error::MissingInput { .. } => Error::MissingInput {
            path: cfg.dataset_dir.clone(),
            reason: "dataset not found; run gen-data first".into(),
        },
        e => e,
    })?;
    // The stored split must be the one this configuration would produce.
    if data != Prepared::from_config(cfg)? {
        return Err(Error::Dataset(format!(
            "{} was generated with a different dataset configuration; run gen-data again",
            cfg.dataset_dir.display()
        )));
    }
    Ok(data)
}

fn load_backbone(cfg: &RunConfig, data: &Prepared) -> Result<BackboneParams<f32>> {
    let path = cfg.checkpoint_dir.join(BACKBONE_CKPT);
    if !path.is_file() {
        return Err(Error::MissingInput {
            path,
            reason: "backbone checkpoint not found; run pretrain first".into(),
        });
    }
    let b = BackboneParams::read_from(&Checkpoint::load(&path)?)?;
    if !b.is_frozen() {
        return Err(Error::Checkpoint(format!("{} is not frozen", path.display())));
    }
    if b.config != BackboneConfig::with_vocab(data.vocab.len()) {
        return Err(Error::Checkpoint(format!(
            "{} does not match this dataset's vocabulary or the model dimensions",
            path.display()
        )));
    }
    Ok(b)
}

fn csv(cfg: &RunConfig, name: &str, header: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
    let mut buf = Vec::new();
    csv_preamble(&mut buf, &cfg.hash(), header)?;
    body(&mut buf)?;
    let path = cfg.output_dir.join(name);
    write_file(&path, &buf)?;
    Ok(path)
}

fn print_reports(o: &ArmOutcome) {
    for r in [&o.i2t, &o.t2i] {
        let parts: Vec<String> = DEFAULT_KS.iter().map(|&k| format!("R@{k}={:.4}", r.r_at(k))).collect();
        println!("{} {}", r.direction, parts.join(" "));
    }
}

fn gen_data(cfg: &RunConfig, ppm: Option<&Path>) -> Result<()> {
    let data = Prepared::from_config(cfg)?;
    ensure_dir(&cfg.dataset_dir)?;
    data.save(&cfg.dataset_dir)?;
    if let Some(dir) = ppm {
        ensure_dir(dir)?;
        export_ppm(dir, &data.taxonomy, &data.records)?;
    }
    println!(
        "wrote {} records ({} base, {} train, {} val, {} test) to {}",
        data.records.len(),
        data.count(Split::PretrainBase),
        data.count(Split::Train),
        data.count(Split::Val),
        data.count(Split::Test),
        cfg.dataset_dir.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let bcfg = BackboneConfig::with_vocab(data.vocab.len());
    let base = data.pairs(Split::PretrainBase, bcfg.max_len)?;
    let t = Instant::now();
    let out = pretrain_backbone(&base, bcfg, &cfg.pretrain)?;
    ensure_dir(&cfg.checkpoint_dir)?;
    ensure_dir(&cfg.output_dir)?;
    let mut ckpt = Checkpoint::new();
    out.backbone.write_to(&mut ckpt);
    ckpt.save(&cfg.checkpoint_dir.join(BACKBONE_CKPT))?;
    csv(cfg, "pretrain.csv", "epoch,loss_con", |b| {
        for (e, l) in out.epoch_losses.iter().enumerate() {
            use std::io::Write;
            writeln!(b, "{e},{l:.8}")?;
        }
        Ok(())
    })?;
    println!(
        "pretrained on {} pairs for {} epochs in {:.1}s, final loss {:.4}",
        base.len(),
        cfg.pretrain.epochs,
        t.elapsed().as_secs_f64(),
        out.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let backbone = load_backbone(cfg, &data)?;
    ensure_dir(&cfg.checkpoint_dir)?;
    ensure_dir(&cfg.output_dir)?;
    let t = Instant::now();
    let out = run_arm(&cfg.train, &backbone, &data)?;
    let mut ckpt = Checkpoint::new();
    out.train.state.write_to(&mut ckpt);
    ckpt.save(&cfg.checkpoint_dir.join(ADAPTED_CKPT))?;
    csv(cfg, "metrics.csv", METRICS_CSV_HEADER, |b| write_metrics_rows(b, &out.train.history))?;
    csv(cfg, "retrieval.csv", REPORT_CSV_HEADER, |b| write_report_rows(b, &[out.i2t.clone(), out.t2i.clone()]))?;
    println!("arm {} trained in {:.1}s", out.arm, t.elapsed().as_secs_f64());
    print_reports(&out);
    Ok(())
}

fn eval(cfg: &RunConfig, zero_shot: bool, dump_weights: bool, split: EvalSplit) -> Result<()> {
    let data = load_data(cfg)?;
    let backbone = load_backbone(cfg, &data)?;
    let state = if zero_shot {
        AdaptState { prompts: None, caa: None }
    } else {
        let path = cfg.checkpoint_dir.join(ADAPTED_CKPT);
        if !path.is_file() {
            return Err(Error::MissingInput {
                path,
                reason: "adapted checkpoint not found; run train first or pass --zero-shot".into(),
            });
        }
        AdaptState::read_from(&Checkpoint::load(&path)?)?
    };
    ensure_dir(&cfg.output_dir)?;
    let split = match split {
        EvalSplit::Val => Split::Val,
        EvalSplit::Test => Split::Test,
    };
    let test = data.pairs(split, backbone.config.max_len)?;
    let (i2t, t2i) = evaluate(&backbone, state.prompts.as_ref(), &test, &DEFAULT_KS)?;
    csv(cfg, "retrieval.csv", REPORT_CSV_HEADER, |b| write_report_rows(b, &[i2t.clone(), t2i.clone()]))?;
    if dump_weights {
        csv(cfg, "token_weights.csv", WEIGHTS_CSV_HEADER, |b| {
            for p in &test {
                let w = token_weights(&backbone, state.prompts.as_ref(), &p.caption, &p.image)?;
                let words: Vec<&str> = p.caption.words().iter().map(|&id| data.vocab.word(id)).collect();
                write_weight_rows(b, &p.id, &words, &w)?;
            }
            Ok(())
        })?;
    }
    for r in [&i2t, &t2i] {
        let parts: Vec<String> = DEFAULT_KS.iter().map(|&k| format!("R@{k}={:.4}", r.r_at(k))).collect();
        println!("{} {}", r.direction, parts.join(" "));
    }
    Ok(())
}

fn run_grad_check(cfg: &RunConfig) -> Result<bool> {
    let t = Instant::now();
    let gc = dcar_core::training::GradCheckConfig {
        seed: cfg.train.seed,
        ..cfg.grad_check.clone()
    };
    let r = grad_check(&cfg.train, &gc)?;
    ensure_dir(&cfg.output_dir)?;
    csv(cfg, "grad_check.csv", "tensor,index,analytic,numeric,rel_err", |b| {
        use std::io::Write;
        for row in &r.rows {
            writeln!(b, "{},{},{:.10e},{:.10e},{:.3e}", row.name, row.index, row.analytic, row.numeric, row.rel_err)?;
        }
        Ok(())
    })?;
    for (name, e) in &r.per_param {
        println!("{name:<16} max rel err {e:.3e}");
    }
    let ok = r.max_rel_err < 1e-4;
    println!(
        "max relative error {:.3e} over {} coordinates in {:.1}s: {}",
        r.max_rel_err,
        r.rows.len(),
        t.elapsed().as_secs_f64(),
        if ok { "ok" } else { "FAILED" }
    );
    Ok(ok)
}

fn ablate(cfg: &RunConfig, group: Group) -> Result<()> {
    let data = load_data(cfg)?;
    let backbone = load_backbone(cfg, &data)?;
    ensure_dir(&cfg.output_dir)?;
    let t = Instant::now();
    let progress = |name: &str, outs: &[ArmOutcome]| {
        let i2t: Vec<String> = outs.iter().map(|o| format!("{:.3}", o.i2t.r_at(1))).collect();
        let t2i: Vec<String> = outs.iter().map(|o| format!("{:.3}", o.t2i.r_at(1))).collect();
        eprintln!(
            "[{:>6.0}s] {name}: I2T R@1 {} | T2I R@1 {}",
            t.elapsed().as_secs_f64(),
            i2t.join(" "),
            t2i.join(" ")
        );
    };
    let seeds = &cfg.ablate_seeds;
    let mut rows = Vec::new();
    if matches!(group, Group::Toggles | Group::All) {
        rows.extend(ablate_toggles(&cfg.train, seeds, &backbone, &data, progress)?);
    }
    if matches!(group, Group::Lambda | Group::All) {
        rows.extend(ablate_lambda(&cfg.train, seeds, &backbone, &data, progress)?);
    }
    if matches!(group, Group::Shots | Group::All) {
        rows.extend(ablate_shots(&cfg.train, seeds, cfg.split_seed, &backbone, &data, progress)?);
    }
    csv(cfg, "ablation.csv", ABLATION_CSV_HEADER, |b| write_ablation_rows(b, &rows))?;
    write_file(&cfg.output_dir.join("ablation.svg"), ablation_svg(&rows).as_bytes())?;
    for r in &rows {
        println!("{:<8} {:<16} {} {:.4} ± {:.4}", r.group, r.arm, r.direction, r.mean(), r.std());
    }
    Ok(())
}

fn report(cfg: &RunConfig, input: Option<&Path>) -> Result<()> {
    let path = input.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("ablation.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingInput {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let rows = read_ablation_rows(&text)?;
    let out = path.with_extension("svg");
    write_file(&out, ablation_svg(&rows).as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { ppm } => gen_data(&cfg, ppm.as_deref())?,
        Command::Pretrain => pretrain(&cfg)?,
        Command::Train => train(&cfg)?,
        Command::Eval {
            zero_shot,
            dump_weights,
            split,
        } => eval(&cfg, *zero_shot, *dump_weights, *split)?,
        Command::GradCheck => return run_grad_check(&cfg),
        Command::Ablate { group } => ablate(&cfg, *group)?,
        Command::Report { input } => report(&cfg, input.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
