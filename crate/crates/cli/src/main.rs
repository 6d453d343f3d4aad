//! `dpa`: toy data generation, two-stage training, dual-pathway generation,
//! evaluation and ablation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use dpa_core::checkpoint;
use dpa_core::config::RunConfig;
use dpa_core::model::Model;
use dpa_core::nn::ParamStore;
use dpa_core::pipeline::{self, AblationRow, Request};
use dpa_core::schedule::DiffusionSchedule;
use dpa_core::toy::{make_dataset, Caption, Dataset, IdentitySpec};
use dpa_core::training::{grad_check, tiny_check_setup, train_adapters, train_base, StepLoss, TrainConfig, TrainLog};

#[derive(Parser)]
#[command(name = "dpa", version, about = "Dual-pathway image-prompt adapters on a toy face world")]
struct Cli {
    /// JSON config with dotted keys; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named base config (default, paper-lr, smoke) applied before --config.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Write heatmap/threshold/filtered/final mask PNGs here.
    #[arg(long, global = true)]
    dump_masks: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy dataset to <out>/dataset.dptoy.
    GenData {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        per_identity: Option<usize>,
    },
    /// Stage 1: train the text-conditioned base model.
    TrainBase {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Stage 2: train IEA and TCA on a frozen base.
    TrainAdapters {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base checkpoint (default <out>/base.dpckpt).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate images for one caption and dataset identity.
    Generate {
        /// e.g. "blue center large"
        #[arg(long)]
        caption: String,
        /// Index of the reference identity in the dataset.
        #[arg(long, default_value_t = 0)]
        identity: u32,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score k generations per (identity, evaluation caption) pair.
    Evaluate {
        #[arg(long)]
        k: Option<usize>,
        /// Use only the first N dataset identities.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// IEA-only, TCA-only, independent and blended fusion side by side.
    Ablate {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep the IEA injection weight and report rank correlations.
    AlphaSweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.7, 0.4, 0.1])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the adapter-loss gradients in f64.
    GradCheck {
        #[arg(long, default_value_t = 24)]
        params: usize,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
    /// Print the resolved config as JSON.
    ShowConfig,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    dump_masks: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, configured: &Option<String>, default: &str) -> PathBuf {
        given
            .clone()
            .or_else(|| configured.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| self.out.join(default))
    }

    fn data_path(&self, given: &Option<PathBuf>) -> PathBuf {
        self.path(given, &self.cfg.dataset_path, "dataset.dptoy")
    }

    fn base_path(&self, given: &Option<PathBuf>) -> PathBuf {
        self.path(given, &self.cfg.base_ckpt_path, "base.dpckpt")
    }

    fn model_path(&self, given: &Option<PathBuf>) -> PathBuf {
        self.path(given, &self.cfg.adapter_ckpt_path, "model.dpckpt")
    }

    fn load_data(&self, given: &Option<PathBuf>) -> Result<Dataset> {
        let p = self.data_path(given);
        Dataset::load(&p).with_context(|| format!("loading dataset {}", p.display()))
    }

    fn load_model(&self, path: &Path) -> Result<Model<f32>> {
        let params = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok(Model::with_params(self.cfg.backbone_config(), self.cfg.adapter_config(), params)?)
    }

    fn identities(&self, data: &Option<PathBuf>, limit: Option<usize>) -> Result<Vec<IdentitySpec>> {
        let mut ids = self.load_data(data)?.identities();
        if let Some(n) = limit {
            ids.truncate(n);
        }
        Ok(ids)
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.preset {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut base: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&cfg.to_json()?)?;
        let over: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        base.extend(over);
        cfg = RunConfig::from_json(&serde_json::to_string(&base)?).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(every: usize, total: usize) -> impl FnMut(&StepLoss) {
    move |r: &StepLoss| {
        if r.step.is_multiple_of(every) || r.step + 1 == total {
            info!("step {}/{} loss {:.5}", r.step + 1, total, r.total);
        }
    }
}

fn write_log(path: &Path, log: &TrainLog, adapters: bool) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    if adapters {
        log.write_adapter_csv(w)?;
    } else {
        log.write_base_csv(w)?;
    }
    Ok(())
}

fn summarize(log: &TrainLog) {
    if let Some((head, tail)) = log.head_tail_means(50) {
        println!("loss: first-50 mean {head:.5}, last-50 mean {tail:.5}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        dump_masks: cli.dump_masks.clone(),
    };
    fs::create_dir_all(&ctx.out)?;
    if let Some(d) = &ctx.dump_masks {
        fs::create_dir_all(d)?;
    }
    let cfg = &ctx.cfg;
    match &cli.command {
        Command::GenData {
            identities,
            per_identity,
        } => {
            let n = identities.unwrap_or(cfg.identities);
            let k = per_identity.unwrap_or(cfg.per_identity);
            let data = make_dataset(n, k, cfg.seed);
            let path = ctx.data_path(&None);
            data.save(&path)?;
            println!("wrote {} samples ({n} identities) to {}", data.len(), path.display());
        }
        Command::TrainBase { data, steps } => {
            let data = ctx.load_data(data)?;
            let steps = steps.unwrap_or(cfg.base_steps);
            let mut model = Model::<f32>::init_base(cfg.backbone_config(), cfg.adapter_config(), cfg.seed)?;
            let log = train_base(&mut model, &data, &cfg.schedule()?, &TrainConfig { steps, ..cfg.base_train_config() }, progress(100, steps))?;
            let path = ctx.base_path(&None);
            checkpoint::save(&path, &model.params)?;
            write_log(&ctx.out.join("base_loss.csv"), &log, false)?;
            summarize(&log);
            println!("wrote {}", path.display());
        }
        Command::TrainAdapters { data, base, steps } => {
            let data = ctx.load_data(data)?;
            let steps = steps.unwrap_or(cfg.adapter_steps);
            let base_params = checkpoint::load(&ctx.base_path(base))?;
            let base_only: ParamStore<f32> = base_params.subset("base.");
            let mut model = Model::with_params(cfg.backbone_config(), cfg.adapter_config(), base_only)?;
            model.init_adapters(cfg.seed)?;
            let schedule: DiffusionSchedule = cfg.schedule()?;
            let log = train_adapters(&mut model, &data, &schedule, &TrainConfig { steps, ..cfg.adapter_train_config() }, progress(100, steps))?;
            let path = ctx.model_path(&None);
            checkpoint::save(&path, &model.params)?;
            write_log(&ctx.out.join("adapter_loss.csv"), &log, true)?;
            summarize(&log);
            println!("wrote {}", path.display());
        }
        Command::Generate {
            caption,
            identity,
            count,
            ckpt,
            data,
        } => {
            let caption: Caption = caption.parse()?;
            let ids = ctx.identities(data, None)?;
            let Some(id) = ids.iter().find(|i| i.id == *identity) else {
                bail!("identity {identity} is not in the dataset ({} identities)", ids.len());
            };
            let model = ctx.load_model(&ctx.model_path(ckpt))?;
            let requests: Vec<Request> = (0..*count)
                .map(|j| Request::for_identity(id, caption, pipeline::image_seed(cfg.seed, id, &caption, j)))
                .collect();
            let results = pipeline::generate(&model, cfg, &requests)?;
            let mut reports = Vec::new();
            for (j, (g, report)) in results.iter().enumerate() {
                let stem = format!("gen_id{}_{}", id.id, j);
                pipeline::write_image_png(&ctx.out.join(format!("{stem}.png")), &g.image)?;
                pipeline::write_mask_png(&ctx.out.join(format!("{stem}_mask.png")), &g.mask)?;
                if let Some(d) = &ctx.dump_masks {
                    pipeline::dump_mask_panels(d, &stem, &g.mask_result)?;
                }
                println!(
                    "{stem}: face {:.4} text {:.3} mask {} px{}",
                    report.face_score.unwrap_or(f64::NAN),
                    report.text_match,
                    report.mask_area,
                    if report.mask_fallback { " (default box)" } else { "" }
                );
                reports.push(serde_json::json!({
                    "image": format!("{stem}.png"),
                    "seed": requests[j].seed,
                    "face_score": report.face_score,
                    "text_match": report.text_match,
                    "mask_area": report.mask_area,
                    "mask_fallback": report.mask_fallback,
                    "mask_seconds": report.mask_seconds,
                    "fuse_seconds": report.fuse_seconds,
                }));
            }
            fs::write(ctx.out.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
        }
        Command::Evaluate { k, limit, ckpt, data } => {
            let ids = ctx.identities(data, *limit)?;
            let pairs = pipeline::evaluation_pairs(&ids);
            let model = if pairs.is_empty() {
                None
            } else {
                Some(ctx.load_model(&ctx.model_path(ckpt))?)
            };
            let k = k.unwrap_or(cfg.images_per_prompt);
            let detailed = match &model {
                Some(m) => pipeline::evaluate_detailed(m, cfg, &pairs, k)?,
                None => Vec::new(),
            };
            if let Some(d) = &ctx.dump_masks {
                for (r, g) in &detailed {
                    let stem = format!("eval_id{}_{}_{}", r.identity_id, r.caption.describe().replace(' ', "-"), r.seed);
                    pipeline::dump_mask_panels(d, &stem, &g.mask_result)?;
                }
            }
            let fallbacks = detailed.iter().filter(|(_, g)| g.mask_result.fallback_box).count();
            if fallbacks > 0 {
                println!("{fallbacks} masks fell back to the centered default box");
            }
            let rows: Vec<_> = detailed.into_iter().map(|(r, _)| r).collect();
            let path = ctx.out.join("metrics.csv");
            pipeline::write_metrics_csv(&rows, BufWriter::new(File::create(&path)?))?;
            let (face, text) = pipeline::metric_means(&rows);
            println!("{} images: mean face {face:.4}, mean text {text:.4}", rows.len());
            println!("wrote {}", path.display());
        }
        Command::Ablate { k, limit, ckpt, data } => {
            let ids = ctx.identities(data, *limit)?;
            let pairs = pipeline::evaluation_pairs(&ids);
            let model = ctx.load_model(&ctx.model_path(ckpt))?;
            let k = k.unwrap_or(cfg.images_per_prompt);
            let result = pipeline::ablate(&model, cfg, &pairs, k)?;
            result.write_csv(BufWriter::new(File::create(ctx.out.join("ablation.csv"))?))?;
            for (row, metrics) in &result.rows {
                let name = format!("ablation_{}.csv", row.label().to_lowercase().replace('+', "_"));
                pipeline::write_metrics_csv(metrics, BufWriter::new(File::create(ctx.out.join(name))?))?;
            }
            println!("{:<12} {:>8} {:>8}", "row", "face", "text");
            for row in AblationRow::ALL {
                let (f, t) = result.means(row);
                println!("{:<12} {f:>8.4} {t:>8.4}", row.label());
            }
            println!("fusion modes differ on {:.0}% of prompts", 100.0 * result.fusion_mode_differs);
        }
        Command::AlphaSweep {
            alphas,
            seeds,
            limit,
            ckpt,
            data,
        } => {
            let ids = ctx.identities(data, *limit)?;
            let pairs = pipeline::evaluation_pairs(&ids);
            let model = ctx.load_model(&ctx.model_path(ckpt))?;
            let seed_list: Vec<u64> = (0..*seeds).map(|s| cfg.seed + s).collect();
            let sweep = pipeline::alpha_sweep(&model, cfg, &pairs, alphas, &seed_list)?;
            let mut csv = String::from("seed,alpha,face_score,text_match\n");
            for s in &sweep {
                for p in &s.points {
                    csv.push_str(&format!("{},{},{},{}\n", s.seed, p.alpha, p.face_score, p.text_match));
                }
                println!("seed {}: rho(alpha, face) {:+.3}, rho(alpha, text) {:+.3}", s.seed, s.rho_face, s.rho_text);
            }
            fs::write(ctx.out.join("alpha_sweep.csv"), csv)?;
            let rf: Vec<f64> = sweep.iter().map(|s| s.rho_face).collect();
            let rt: Vec<f64> = sweep.iter().map(|s| s.rho_text).collect();
            println!(
                "median rho(alpha, face) {:+.3}, median rho(alpha, text) {:+.3}",
                pipeline::median(&rf),
                pipeline::median(&rt)
            );
        }
        Command::GradCheck { params, epsilon } => {
            let (model, input) = tiny_check_setup(cfg.seed)?;
            let tc = dpa_core::training::TrainConfig {
                routing: cfg.routing,
                weights: cfg.loss_weights(),
                ..Default::default()
            };
            let report = grad_check(&model, &input, &tc, *params, *epsilon, cfg.seed)?;
            for c in &report.checks {
                println!(
                    "{}[{}] analytic {:+.6e} numeric {:+.6e} rel {:.2e}",
                    c.name, c.index, c.analytic, c.numeric, c.rel_err
                );
            }
            println!("max relative error {:.3e} over {} parameters", report.max_rel_err, report.checks.len());
            if report.max_rel_err >= 1e-3 {
                bail!("gradient check failed");
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
