use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pvit_core::harness::{build_variant, run_ablation, synthetic_pool, Corpus, VariantKind, VariantPlan};
use pvit_core::scenegen::{generate_sample, read_dataset, write_dataset};
use pvit_core::tensor::finite_diff_check_at;
use pvit_core::trainer::metrics_csv;
use pvit_core::{
    evaluate, AnnotationSet, CensusMode, Checkpoint, Dataset, Graph, Origin, ParamGroup, RunConfig, TaskSet, TrainData,
    Trainer, Var,
};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Prompted video transformer: data generation, training and ablations.
#[derive(Parser)]
#[command(name = "pvit", version)]
struct Cli {
    /// TOML run configuration; omitted sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model and training seed (gen-data: the corpus seed).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by `gen-data`; the corpus is regenerated in memory
    /// when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the real, validation and synthetic splits as dataset files.
    GenData,
    /// Train the configured variant; writes metrics.csv, final.ckpt, eval.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also checkpoint after every epoch as epoch{N}.ckpt.
        #[arg(long)]
        checkpoint_every_epoch: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every listed variant once per seed; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "baseline,pvit,shuffled")]
        variants: Vec<VariantKind>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Compare reverse-mode and central-difference gradients of the total loss.
    Gradcheck {
        /// Scalars checked per parameter tensor; 0 checks all of them.
        #[arg(long, default_value_t = 8)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Parameter census by group and multiply-accumulate counts.
    Params,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::GenData => {
            config.data.seed = cli.seed;
            gen_data(&config, out)
        }
        Command::Train {
            data,
            resume,
            checkpoint_every_epoch,
        } => train(
            &config,
            cli.seed,
            out,
            data.data.as_deref(),
            resume.as_deref(),
            checkpoint_every_epoch,
        ),
        Command::Eval { data, checkpoint } => eval(&config, cli.seed, out, data.data.as_deref(), &checkpoint),
        Command::Ablate { data, variants, seeds } => {
            let corpus = corpus(&config, data.data.as_deref())?;
            let table = run_ablation(&variants, &seeds, &config, &corpus, |v, s, run| {
                eprintln!("{v} seed {s}: accuracy {:.4}", run.eval.accuracy)
            })?;
            write(&out.join("ablation.csv"), table.to_csv())
        }
        Command::Gradcheck { per_tensor, step } => gradcheck(&config, cli.seed, per_tensor, step),
        Command::Params => params(&config, cli.seed, out),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

const SPLITS: [&str; 3] = ["real", "val", "synthetic"];

fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let corpus = Corpus::generate(config)?;
    let scene = config.data.scene(&config.backbone);
    for (name, samples) in SPLITS.into_iter().zip([corpus.real, corpus.val, corpus.synthetic]) {
        let path = out.join(format!("{name}.bin"));
        let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_dataset(
            &mut file,
            &Dataset {
                config: scene.clone(),
                samples,
            },
        )?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn corpus(config: &RunConfig, dir: Option<&Path>) -> Result<Corpus> {
    let Some(dir) = dir else {
        return Ok(Corpus::generate(config)?);
    };
    let scene = config.data.scene(&config.backbone);
    let load = |name: &str| -> Result<_> {
        let path = dir.join(format!("{name}.bin"));
        let mut file = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
        let (_, dataset) = read_dataset(&mut file, &scene).with_context(|| format!("reading {}", path.display()))?;
        Ok(dataset.samples)
    };
    Ok(Corpus {
        real: load(SPLITS[0])?,
        val: load(SPLITS[1])?,
        synthetic: load(SPLITS[2])?,
    })
}

fn plan(config: &RunConfig, seed: u64) -> Result<VariantPlan> {
    Ok(build_variant(&config.variant, config, seed)?)
}

fn train(
    config: &RunConfig,
    seed: u64,
    out: &Path,
    data: Option<&Path>,
    resume: Option<&Path>,
    every_epoch: bool,
) -> Result<()> {
    let corpus = corpus(config, data)?;
    let plan = plan(config, seed)?;
    let synthetic = synthetic_pool(&plan, &corpus, seed);
    let data = TrainData {
        real: &corpus.real,
        synthetic: &synthetic,
        val: &corpus.val,
    };
    let mut trainer = match resume {
        Some(path) => Trainer::resume(
            plan.model,
            plan.train,
            config.losses.clone(),
            data,
            &Checkpoint::load(path)?,
        )?,
        None => Trainer::new(plan.model, plan.train, config.losses.clone(), data)?,
    };
    write(&out.join("config.toml"), config.to_toml())?;
    while !trainer.is_finished() {
        let m = trainer.run_epoch()?;
        eprintln!(
            "epoch {} loss {:.4} val {}",
            m.epoch,
            m.loss_total,
            m.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        let epoch = m.epoch;
        if every_epoch {
            trainer.checkpoint().save(&out.join(format!("epoch{epoch}.ckpt")))?;
        }
    }
    write(&out.join("metrics.csv"), metrics_csv(trainer.history()))?;
    trainer.checkpoint().save(&out.join("final.ckpt"))?;
    let report = evaluate(trainer.model(), &corpus.val)?;
    write(&out.join("eval.json"), serde_json::to_string_pretty(&report)?)
}

fn eval(config: &RunConfig, seed: u64, out: &Path, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let corpus = corpus(config, data)?;
    let plan = plan(config, seed)?;
    let synthetic = synthetic_pool(&plan, &corpus, seed);
    let data = TrainData {
        real: &corpus.real,
        synthetic: &synthetic,
        val: &corpus.val,
    };
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let trainer = Trainer::resume(plan.model, plan.train, config.losses.clone(), data, &ckpt)?;
    let report = evaluate(trainer.model(), &corpus.val)?;
    println!("accuracy {:.4} on {} samples", report.accuracy, report.samples);
    write(&out.join("eval.json"), serde_json::to_string_pretty(&report)?)
}

fn gradcheck(config: &RunConfig, seed: u64, per_tensor: usize, step: f64) -> Result<()> {
    let model = plan(config, seed)?.model;
    let tasks: TaskSet = model.tasks().collect();
    let scene = config.data.scene(&config.backbone);
    let origin = if tasks.is_empty() {
        Origin::Real
    } else {
        Origin::Synthetic
    };
    let samples = (0..2)
        .map(|i| {
            let mut s = generate_sample(&scene, seed.wrapping_add(i), origin, &tasks)?;
            s.annotations.action.get_or_insert(i as usize);
            Ok(s)
        })
        .collect::<pvit_core::Result<Vec<_>>>()?;
    let anns: Vec<&AnnotationSet> = samples.iter().map(|s| &s.annotations).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, (_, param))| {
            let n = param.value.numel();
            let k = if per_tensor == 0 { n } else { n.min(per_tensor) };
            sample_indices(&mut rng, n, k)
                .into_iter()
                .map(move |i| (p, i))
                .collect::<Vec<_>>()
        })
        .collect();
    let f = |g: &mut Graph, vars: &[Var]| -> pvit_core::Result<Var> {
        let bound = model.params().bound_from_vars(vars);
        let preds = samples
            .iter()
            .map(|s| Ok(model.forward(g, &bound, &s.pixels, s.annotations.tasks())?.predictions))
            .collect::<pvit_core::Result<Vec<_>>>()?;
        Ok(pvit_core::losses::total_loss(g, &preds, &anns, &config.losses)?.loss)
    };
    let report = finite_diff_check_at(f, &model.params().values(), step, &coords)?;
    let worst = report.worst.map(|(p, i)| {
        let name = &model.params().iter().nth(p).expect("parameter").1.name;
        format!("{name}[{i}]")
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "max_rel_error": report.max_rel_error,
            "worst": worst,
            "analytic": report.analytic,
            "numeric": report.numeric,
            "checked": report.checked,
        }))?
    );
    if !report.max_rel_error.is_finite() {
        bail!("non-finite gradient error");
    }
    Ok(())
}

fn params(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let model = plan(config, seed)?.model;
    let census = |mode| {
        let c = model.census(mode);
        let groups: serde_json::Map<_, _> = ParamGroup::ALL
            .into_iter()
            .map(|g| (g.name().to_string(), json!(c.group(g))))
            .collect();
        json!({ "total": c.total(), "groups": groups })
    };
    let report = json!({
        "variant": config.variant.kind.name(),
        "train": census(CensusMode::Train),
        "inference": census(CensusMode::Inference),
        "inference_macs": model.inference_macs(),
        "training_macs": model.training_macs(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    write(&out.join("params.json"), text)
}
