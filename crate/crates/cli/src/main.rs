use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use partgda::checkpoint::{
    generative_checkpoint, load_generative, load_segmenter, load_vae, segmenter_checkpoint, vae_checkpoint, Checkpoint,
};
use partgda::dataset::{generate_synthetic, load_dataset, make_split, save_dataset, LabeledSet, SyntheticFamily, SyntheticShapeSpec, UnlabeledSet};
use partgda::geometry::write_labeled_ply;
use partgda::latent_prior::{encode_dataset, train_global_prior_on, train_point_prior_on, GenerativeModel, LatentStats};
use partgda::pipeline::{
    check_no_leakage, filter_pseudo_labels, run_experiment_with, score_records, step2_generate_variants, ExperimentConfig,
    ExperimentReport, PseudoLabelRecord, METHODS,
};
use partgda::segmentation::{evaluate_miou, train_segmenter};
use partgda::vae::train_vae;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "partgda", version, about = "Generative data augmentation for part segmentation")]
struct Cli {
    /// Experiment configuration as one JSON document; defaults to the desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed used by the chosen verb.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(flatten)]
    gda: GdaFlags,
    #[command(subcommand)]
    verb: Verb,
}

/// Per-field overrides of the augmentation settings.
#[derive(Args, Default)]
struct GdaFlags {
    #[arg(long, global = true, value_delimiter = ',')]
    tau_list: Option<Vec<usize>>,
    #[arg(long, global = true)]
    variants_per_tau: Option<usize>,
    #[arg(long, global = true)]
    tau_prime: Option<usize>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    voxel_resolution: Option<usize>,
    #[arg(long, global = true)]
    sanity_factor: Option<f64>,
    #[arg(long, global = true)]
    confidence_threshold: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    /// The VAE.
    Stage1,
    /// Both latent priors on a frozen VAE.
    Stage2,
}

#[derive(Subcommand)]
enum Verb {
    /// Writes a fully labeled synthetic dataset.
    GenData {
        #[arg(long)]
        family: SyntheticFamily,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keeps a fraction of a dataset labeled and strips the rest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one stage of the generative model.
    TrainGen {
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        /// VAE checkpoint from stage 1, required for stage 2.
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diffuse-denoise variants of every labeled sample.
    GenVariants {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also writes each variant as a labeled PLY file here.
        #[arg(long)]
        ply: Option<PathBuf>,
    },
    /// Trains a segmenter on the labeled samples of one or more datasets.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        /// Further datasets whose labeled samples join the training set.
        #[arg(long)]
        extra: Vec<PathBuf>,
        #[arg(long)]
        no_tda: bool,
        /// Held-out dataset to evaluate on.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Labels the unlabeled samples of a dataset with a trained segmenter.
    PseudoLabel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores pseudo labels by conditional reconstruction and keeps those at or above delta.
    CrdFilter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs every method on every family and seed.
    RunAll {
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the per-method summary of a saved report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::desk(),
    };
    let f = &cli.gda;
    let g = &mut cfg.gda;
    if let Some(v) = &f.tau_list {
        g.tau_list = v.clone();
    }
    if let Some(v) = f.variants_per_tau {
        g.variants_per_tau = v;
    }
    if let Some(v) = f.tau_prime {
        g.tau_prime = v;
    }
    if let Some(v) = f.delta {
        g.delta = v;
    }
    if let Some(v) = f.voxel_resolution {
        g.voxel_resolution = v;
    }
    if let Some(v) = f.sanity_factor {
        g.sanity_factor = v;
    }
    if let Some(v) = f.confidence_threshold {
        g.confidence_threshold = v;
    }
    if let Some(v) = &f.seeds {
        g.seeds = v.clone();
    }
    Ok(cfg)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load(dir: &Path) -> Result<(LabeledSet, UnlabeledSet, usize)> {
    let (l, u, m) = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((l, u, m.c))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_summary(report: &ExperimentReport) {
    println!("{:<20} {:>10}", "method", "mean mIoU");
    for m in &report.methods {
        match report.mean.get(m) {
            Some(v) => println!("{m:<20} {:>10.4}", v),
            None => println!("{m:<20} {:>10}", "failed"),
        }
    }
    if let Some(g) = report.gain(METHODS[3], METHODS[1]) {
        println!("gain of {} over {}: {g:+.2} points", METHODS[3], METHODS[1]);
    }
    println!("{} runs in {:.0} s, config {}", report.runs.len(), report.wall_clock_seconds, report.config_hash);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cli.seed;
    match cli.verb {
        Verb::GenData { family, count, points, out } => {
            let spec = SyntheticShapeSpec::new(family, points.unwrap_or(cfg.points), seed.unwrap_or(cfg.data_seed));
            let set = generate_synthetic(&spec, count.unwrap_or(cfg.train_count))?;
            save_dataset(&out, &set, &UnlabeledSet::default(), Some(spec.rng_seed), Some(&spec))?;
            eprintln!("wrote {} {} samples to {}", set.len(), family.name(), out.display());
        }
        Verb::Split { data, fraction, out } => {
            let (labeled, unlabeled, _) = load(&data)?;
            if !unlabeled.is_empty() {
                bail!("{} already contains unlabeled samples", data.display());
            }
            let s = seed.unwrap_or(0);
            let (l, u, mut manifest) = make_split(&labeled, fraction.unwrap_or(cfg.labeled_fraction), &mut ChaCha8Rng::seed_from_u64(s))?;
            manifest.seed = s;
            save_dataset(&out, &l, &u, Some(s), None)?;
            write_json(&out.join("split.json"), &manifest)?;
            eprintln!("{} labeled, {} unlabeled", l.len(), u.len());
        }
        Verb::TrainGen { stage, data, vae, out } => {
            let (l, u, c) = load(&data)?;
            let (mut g, _) = cfg.for_parts(c);
            if let Some(s) = seed {
                g = g.with_seed(s);
            }
            match stage {
                Stage::Stage1 => {
                    let (model, history) = train_vae(&l, &u, g.vae.clone(), &g.vae_train)?;
                    vae_checkpoint(&model).save(&out)?;
                    eprintln!("VAE loss {:.4} after {} epochs", history.loss.last().copied().unwrap_or(f64::NAN), history.loss.len());
                }
                Stage::Stage2 => {
                    let path = vae.context("stage2 needs --vae")?;
                    let model = load_vae(&load_ckpt(&path)?)?;
                    let latents = encode_dataset(&model, &l, &u)?;
                    let stats = LatentStats::fit(&latents.z, &latents.h);
                    let schedule = g.schedule.build()?;
                    let (global, gh) = train_global_prior_on(&latents, &stats, &schedule, g.global.clone(), &g.prior_train)?;
                    let (point, ph) = train_point_prior_on(&latents, &stats, &schedule, &g.point, &g.prior_train)?;
                    let full = GenerativeModel { vae: model, global, point, schedule };
                    generative_checkpoint(&full).save(&out)?;
                    let last = |h: &[f64]| h.last().copied().unwrap_or(f64::NAN);
                    eprintln!("prior losses: global {:.4}, point {:.4}", last(&gh.loss), last(&ph.loss));
                }
            }
        }
        Verb::GenVariants { data, model, out, ply } => {
            let (l, _, _) = load(&data)?;
            let model = load_generative(&load_ckpt(&model)?)?;
            let v = step2_generate_variants(&model, &l, &cfg.gda, &mut ChaCha8Rng::seed_from_u64(seed.unwrap_or(0)))?;
            save_dataset(&out, &v.set, &UnlabeledSet::default(), seed, None)?;
            if let Some(dir) = ply {
                fs::create_dir_all(&dir)?;
                for s in &v.set.samples {
                    let name: String = s.id.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' { ch } else { '_' }).collect();
                    write_labeled_ply(&dir.join(format!("{name}.ply")), &s.cloud, &s.mask)?;
                }
            }
            eprintln!("{} variants, {} dropped", v.set.len(), v.dropped);
        }
        Verb::TrainSeg { data, extra, no_tda, test, out } => {
            let (mut train, _, c) = load(&data)?;
            for dir in &extra {
                train.extend(load(dir)?.0);
            }
            let (_, mut s) = cfg.for_parts(c);
            if let Some(v) = seed {
                s.rng_seed = v;
            }
            if no_tda {
                s.tda = None;
            }
            let test = test.map(|dir| load(&dir)).transpose()?;
            if let Some((t, _, _)) = &test {
                check_no_leakage(&t.ids(), &[&train])?;
            }
            let (model, history) = train_segmenter(&train, &s)?;
            segmenter_checkpoint(&model).save(&out)?;
            eprintln!("trained on {} samples, final loss {:.4}", train.len(), history.loss.last().copied().unwrap_or(f64::NAN));
            if let Some((t, _, _)) = &test {
                println!("{:.6}", evaluate_miou(&model, t)?);
            }
        }
        Verb::PseudoLabel { model, data, out } => {
            let (_, u, _) = load(&data)?;
            let f = load_segmenter(&load_ckpt(&model)?)?;
            let records = partgda::pipeline::step3_pseudo_label(&f, &u);
            let set = LabeledSet {
                samples: records
                    .into_iter()
                    .map(|r| partgda::dataset::LabeledCloud { id: r.sample_id, cloud: r.cloud, mask: r.pseudo_mask })
                    .collect(),
            };
            save_dataset(&out, &set, &UnlabeledSet::default(), None, None)?;
            eprintln!("pseudo-labeled {} samples", set.len());
        }
        Verb::CrdFilter { model, pseudo, out } => {
            let (set, _, _) = load(&pseudo)?;
            let model = load_generative(&load_ckpt(&model)?)?;
            let mut records: Vec<PseudoLabelRecord> = set
                .samples
                .into_iter()
                .map(|s| PseudoLabelRecord { sample_id: s.id, cloud: s.cloud, pseudo_mask: s.mask, crd_miou: None, accepted: false })
                .collect();
            score_records(&model, &mut records, &cfg.gda, &mut ChaCha8Rng::seed_from_u64(seed.unwrap_or(0)))?;
            let (accepted, rejected) = filter_pseudo_labels(&records, cfg.gda.delta);
            save_dataset(&out, &accepted, &UnlabeledSet::default(), None, None)?;
            let scores: serde_json::Map<String, serde_json::Value> =
                records.iter().map(|r| (r.sample_id.clone(), serde_json::json!(r.crd_miou))).collect();
            write_json(&out.join("scores.json"), &scores)?;
            eprintln!("accepted {}, rejected {} at delta {}", accepted.len(), rejected.len(), cfg.gda.delta);
        }
        Verb::RunAll { out } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.gda.seeds = vec![s];
            }
            fs::create_dir_all(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let report = run_experiment_with(&cfg, |r| {
                eprintln!("{} seed {}: {:?} ({:.0} s)", r.family.name(), r.seed, r.miou, r.seconds);
                for (m, e) in &r.errors {
                    eprintln!("  {m} failed: {e}");
                }
            })?;
            write_json(&out.join("report.json"), &report)?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            print_summary(&report);
        }
        Verb::Report { input, csv } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report: ExperimentReport = serde_json::from_str(&text)?;
            if csv {
                print!("{}", report.to_csv());
            } else {
                print_summary(&report);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
