//! Command-line front end: dataset generation, training, evaluation, the
//! four-row component ablation sweep, and mean±std report emission.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or subcommand), 2
//! runtime failure (IO, config, or a non-finite loss abort).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{CamlError, Result};
use crate::trainer::{
    evaluate_checkpoint, eval_rows_to_csv, parse_eval_csv, parse_train_config, parse_triple,
    train_run, EvalRow, EvalSplit, TrainConfig,
};
use crate::volgen::generate_dataset;

#[derive(Parser)]
#[command(
    name = "caml",
    about = "Semi-supervised 3D segmentation with co-teaching, cross-sample attention, and omni-correlation consistency",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic volumetric dataset with a manifest.
    GenData {
        /// Output directory for volumes, labels, and manifest.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of samples that keep their labels for training.
        #[arg(long = "labeled-fraction", default_value_t = 0.1)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 40)]
        samples: usize,
        /// Volume dims as D,H,W.
        #[arg(long, default_value = "32,32,32")]
        dims: String,
    },
    /// Train one run per seed from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Seed override; repeatable for multi-seed sweeps.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Parent directory; each run lands in out/seed<N>/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with vanilla-branch sliding-window inference.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (containing fv.ckpt) or a checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest to evaluate on; defaults to the training manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Window dims D,H,W; defaults to the config crop.
        #[arg(long)]
        window: Option<String>,
        /// Stride D,H,W; defaults to half the window.
        #[arg(long)]
        stride: Option<String>,
        /// Which samples to score: all, labeled, or unlabeled.
        #[arg(long, default_value = "all")]
        split: String,
        /// Where to write eval.csv; defaults next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the four component rows (baseline, +OCC, +CMA, full) per seed
    /// and evaluate each final checkpoint.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Held-out manifest for scoring; defaults to the training manifest.
        #[arg(long = "eval-manifest")]
        eval_manifest: Option<PathBuf>,
        #[arg(long)]
        window: Option<String>,
        #[arg(long)]
        stride: Option<String>,
    },
    /// Aggregate eval.csv files from run directories into mean±std rows.
    Report {
        /// Run directories, each holding an eval.csv.
        run_dirs: Vec<PathBuf>,
        /// Optional directory for report.md + summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by the `caml` binary.
pub fn run() -> i32 {
    run_with_args(std::env::args().collect())
}

pub fn run_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage/help text; route errors to stderr
            // and fold every parse problem into the usage exit code, except
            // explicit help/version requests which are success
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("caml: {e}");
            2
        }
    }
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData {
            out,
            seed,
            labeled_fraction,
            samples,
            dims,
        } => {
            let dims = parse_triple(&dims)
                .ok_or_else(|| CamlError::Config(format!("bad dims {dims:?}")))?;
            let manifest = generate_dataset(seed, samples, dims, labeled_fraction, &out)?;
            println!(
                "wrote {} samples ({} labeled) at {:?} to {}",
                manifest.entries.len(),
                manifest.labeled_count(),
                manifest.dims,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { config, seeds, out } => {
            let cfg = load_config(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            for seed in seeds {
                let run_cfg = TrainConfig { seed, ..cfg.clone() };
                let run_dir = out.join(format!("seed{seed}"));
                let log = train_run(&run_cfg, &run_dir)?;
                match log.rows.last() {
                    Some(last) => println!(
                        "seed{seed}: {} iterations, final total {:.4} (L_s {:.4}, l_c {:.4}, l_o {:.4}) -> {}",
                        log.rows.len(),
                        last.breakdown.total,
                        last.breakdown.l_s,
                        last.breakdown.l_c,
                        last.breakdown.l_o,
                        run_dir.display()
                    ),
                    None => println!("seed{seed}: 0 iterations, wrote initialization -> {}", run_dir.display()),
                }
            }
            Ok(())
        }
        Cmd::Eval {
            config,
            ckpt,
            manifest,
            window,
            stride,
            split,
            out,
        } => {
            let cfg = load_config(&config)?;
            let split = parse_split(&split)?;
            let window = opt_triple(window.as_deref(), cfg.crop)?;
            let stride = opt_triple(
                stride.as_deref(),
                [
                    (window[0] / 2).max(1),
                    (window[1] / 2).max(1),
                    (window[2] / 2).max(1),
                ],
            )?;
            let ckpt_file = resolve_ckpt(&ckpt);
            let manifest = manifest.unwrap_or_else(|| cfg.manifest.clone());
            let rows = evaluate_checkpoint(
                &ckpt_file,
                &manifest,
                split,
                window,
                stride,
                cfg.n_levels,
                cfg.base_channels,
                cfg.proj_dim,
            )?;
            let out_dir = out.unwrap_or_else(|| {
                ckpt_file
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            fs::create_dir_all(&out_dir)?;
            let csv_path = out_dir.join("eval.csv");
            fs::write(&csv_path, eval_rows_to_csv(&rows))?;
            print_eval_summary(&rows);
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        Cmd::Ablate {
            config,
            seeds,
            out,
            eval_manifest,
            window,
            stride,
        } => {
            let cfg = load_config(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let window = opt_triple(window.as_deref(), cfg.crop)?;
            let stride = opt_triple(
                stride.as_deref(),
                [
                    (window[0] / 2).max(1),
                    (window[1] / 2).max(1),
                    (window[2] / 2).max(1),
                ],
            )?;
            let score_manifest = eval_manifest.unwrap_or_else(|| cfg.manifest.clone());
            let mut groups: Vec<(&str, Vec<Vec<EvalRow>>)> = Vec::new();
            for (name, enable_cma, enable_occ) in ABLATION_VARIANTS {
                let mut per_seed = Vec::new();
                for &seed in &seeds {
                    let run_cfg = TrainConfig {
                        seed,
                        enable_cma,
                        enable_occ,
                        ..cfg.clone()
                    };
                    let run_dir = out.join(format!("{name}-seed{seed}"));
                    train_run(&run_cfg, &run_dir)?;
                    let rows = evaluate_checkpoint(
                        &run_dir.join("fv.ckpt"),
                        &score_manifest,
                        EvalSplit::All,
                        window,
                        stride,
                        run_cfg.n_levels,
                        run_cfg.base_channels,
                        run_cfg.proj_dim,
                    )?;
                    fs::write(run_dir.join("eval.csv"), eval_rows_to_csv(&rows))?;
                    println!(
                        "{name}-seed{seed}: mean dice {:.4}",
                        mean(&rows.iter().map(|r| r.dice).collect::<Vec<_>>())
                    );
                    per_seed.push(rows);
                }
                groups.push((name, per_seed));
            }
            let table = ablation_table(&groups);
            print!("{table}");
            fs::write(out.join("ablation.md"), table)?;
            Ok(())
        }
        Cmd::Report { run_dirs, out } => {
            if run_dirs.is_empty() {
                return Err(CamlError::Config(
                    "report needs at least one run directory".into(),
                ));
            }
            let (md, csv) = report_from_dirs(&run_dirs)?;
            print!("{md}");
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("report.md"), &md)?;
                fs::write(out.join("summary.csv"), &csv)?;
            }
            Ok(())
        }
    }
}

/// Table-2-style component rows, in presentation order.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("occ", false, true),
    ("cma", true, false),
    ("full", true, true),
];

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CamlError::Config(format!("{}: {e}", path.display())))?;
    let cfg = parse_train_config(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<EvalSplit> {
    match s {
        "all" => Ok(EvalSplit::All),
        "labeled" => Ok(EvalSplit::Labeled),
        "unlabeled" => Ok(EvalSplit::Unlabeled),
        other => Err(CamlError::Config(format!(
            "split must be all, labeled, or unlabeled, got {other:?}"
        ))),
    }
}

fn opt_triple(s: Option<&str>, default: [usize; 3]) -> Result<[usize; 3]> {
    match s {
        None => Ok(default),
        Some(text) => {
            parse_triple(text).ok_or_else(|| CamlError::Config(format!("bad D,H,W triple {text:?}")))
        }
    }
}

fn resolve_ckpt(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("fv.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn fmt_pct(values: &[f64]) -> String {
    if values.is_empty() {
        return "nan".into();
    }
    format!(
        "{:.2}±{:.2}",
        100.0 * mean(values),
        100.0 * sample_std(values)
    )
}

fn fmt_raw(values: &[f64]) -> String {
    if values.is_empty() {
        return "nan".into();
    }
    format!("{:.2}±{:.2}", mean(values), sample_std(values))
}

fn print_eval_summary(rows: &[EvalRow]) {
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let jac: Vec<f64> = rows.iter().map(|r| r.jaccard).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
    let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd).collect();
    println!(
        "{} samples: dice {:.4}, jaccard {:.4}, hd95 {}, asd {} ({} surface failures)",
        rows.len(),
        mean(&dice),
        mean(&jac),
        if hd.is_empty() { "nan".into() } else { format!("{:.4}", mean(&hd)) },
        if asd.is_empty() { "nan".into() } else { format!("{:.4}", mean(&asd)) },
        rows.len() - hd.len()
    );
}

/// Per-run means of one eval.csv.
struct RunMeans {
    dice: f64,
    jaccard: f64,
    hd95: Option<f64>,
    asd: Option<f64>,
}

fn run_means(rows: &[EvalRow]) -> Result<RunMeans> {
    if rows.is_empty() {
        return Err(CamlError::Format("eval.csv contains no rows".into()));
    }
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
    let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd).collect();
    Ok(RunMeans {
        dice: mean(&rows.iter().map(|r| r.dice).collect::<Vec<_>>()),
        jaccard: mean(&rows.iter().map(|r| r.jaccard).collect::<Vec<_>>()),
        hd95: (!hd.is_empty()).then(|| mean(&hd)),
        asd: (!asd.is_empty()).then(|| mean(&asd)),
    })
}

/// Strips a trailing `-seed<digits>` (or a bare `seed<digits>`) so repeat
/// runs of one configuration aggregate together.
fn group_name(dir: &Path) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    if let Some(pos) = name.rfind("-seed") {
        if name[pos + 5..].chars().all(|c| c.is_ascii_digit()) && pos > 0 {
            return name[..pos].to_string();
        }
    }
    if let Some(rest) = name.strip_prefix("seed") {
        if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
            return "run".to_string();
        }
    }
    name
}

/// Builds the markdown report and the raw CSV summary from run dirs, each
/// of which must hold an `eval.csv`. Runs whose directory names differ only
/// by a seed suffix are aggregated into one mean±std row.
pub fn report_from_dirs(run_dirs: &[PathBuf]) -> Result<(String, String)> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::BTreeMap<String, Vec<RunMeans>> = Default::default();
    for dir in run_dirs {
        let csv_path = dir.join("eval.csv");
        let text = fs::read_to_string(&csv_path)
            .map_err(|e| CamlError::Format(format!("{}: {e}", csv_path.display())))?;
        let rows = parse_eval_csv(&text)
            .map_err(|e| CamlError::Format(format!("{}: {e}", csv_path.display())))?;
        let g = group_name(dir);
        if !order.contains(&g) {
            order.push(g.clone());
        }
        grouped.entry(g).or_default().push(run_means(&rows)?);
    }

    let mut md = String::from(
        "| config | seeds | Dice % | Jaccard % | 95HD | ASD |\n|---|---|---|---|---|---|\n",
    );
    let mut csv = String::from(
        "config,seeds,dice_mean,dice_std,jaccard_mean,jaccard_std,hd95_mean,hd95_std,asd_mean,asd_std\n",
    );
    for g in &order {
        let runs = &grouped[g];
        let dice: Vec<f64> = runs.iter().map(|r| r.dice).collect();
        let jac: Vec<f64> = runs.iter().map(|r| r.jaccard).collect();
        let hd: Vec<f64> = runs.iter().filter_map(|r| r.hd95).collect();
        let asd: Vec<f64> = runs.iter().filter_map(|r| r.asd).collect();
        let _ = writeln!(
            md,
            "| {g} | {} | {} | {} | {} | {} |",
            runs.len(),
            fmt_pct(&dice),
            fmt_pct(&jac),
            fmt_raw(&hd),
            fmt_raw(&asd)
        );
        let num = |xs: &[f64], f: fn(&[f64]) -> f64| -> String {
            if xs.is_empty() {
                "nan".into()
            } else {
                format!("{:.6}", f(xs))
            }
        };
        let _ = writeln!(
            csv,
            "{g},{},{},{},{},{},{},{},{},{}",
            runs.len(),
            num(&dice, mean),
            num(&dice, sample_std),
            num(&jac, mean),
            num(&jac, sample_std),
            num(&hd, mean),
            num(&hd, sample_std),
            num(&asd, mean),
            num(&asd, sample_std),
        );
    }
    Ok((md, csv))
}

fn ablation_table(groups: &[(&str, Vec<Vec<EvalRow>>)]) -> String {
    let mut md = String::from(
        "| components | seeds | Dice % | Jaccard % | 95HD | ASD |\n|---|---|---|---|---|---|\n",
    );
    for (name, per_seed) in groups {
        let collect = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Vec<f64> {
            per_seed
                .iter()
                .map(|rows| {
                    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
                    mean(&vals)
                })
                .filter(|v| v.is_finite())
                .collect()
        };
        let dice = collect(&|r| Some(r.dice));
        let jac = collect(&|r| Some(r.jaccard));
        let hd = collect(&|r| r.hd95);
        let asd = collect(&|r| r.asd);
        let _ = writeln!(
            md,
            "| {name} | {} | {} | {} | {} | {} |",
            per_seed.len(),
            fmt_pct(&dice),
            fmt_pct(&jac),
            fmt_raw(&hd),
            fmt_raw(&asd)
        );
    }
    md
}
