use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use bnta::ablate::{self, Sweep};
use bnta::config::{self, RunConfig};
use bnta::experiment::{self, Evaluation, ShiftComparison};
use bnta::{checkpoint, manifest, report};
use bnta_core::layers::GroupSet;
use bnta_core::synth::{self, build_benchmark};
use clap::{Parser, Subcommand};
use serde::Serialize;
use toml::{Table, Value};

/// Batch-norm test-time adaptation for person re-identification on a
/// synthetic benchmark.
#[derive(Parser)]
#[command(name = "bnta", version)]
struct Cli {
    /// TOML run configuration; missing keys keep their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set tta.lr=0.001`. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed of every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark as PPM images with JSON manifests.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the source-domain training set.
    Train {
        /// Dataset directory written by `gen`, or a training manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Identity loss only, without the self-supervised heads.
        #[arg(long)]
        no_ssl: bool,
    },
    /// Adapt a checkpoint on the gallery of one test split.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen`, or a test manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Groups to update: `none`, `all-bn` or a list of
        /// bn_gamma, bn_beta, bn_mu, bn_sigma2, conv, in.
        #[arg(long)]
        groups: Option<String>,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Score a checkpoint over the test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen` (needed for `--probe-bn`), or a test manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also adapt on every split's gallery and compare.
        #[arg(long)]
        adapt: bool,
        #[arg(long)]
        groups: Option<String>,
        /// Report the output shift of a BN layer (index or `last`).
        #[arg(long, value_name = "LAYER")]
        probe_bn: Option<String>,
        #[arg(long)]
        splits: Option<usize>,
    },
    /// Run the loss, layer and BN-parameter ablation grids.
    Ablate {
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma separated: losses, layers, bn_params.
        #[arg(long, default_value = "losses,layers,bn_params")]
        sweeps: String,
        #[arg(long)]
        splits: Option<usize>,
    },
}

fn nested(path: &[&str], value: Value) -> Table {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    parents.iter().rev().fold(t, |inner, key| {
        let mut outer = Table::new();
        outer.insert(key.to_string(), Value::Table(inner));
        outer
    })
}

/// Defaults, then the file, then `--set`, then the dedicated flags.
fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli
        .set
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<bnta::Result<Vec<_>>>()?;
    if let Some(seed) = cli.seed {
        overrides.push(nested(&["seed"], Value::Integer(i64::try_from(seed).context("seed too large")?)));
    }
    let groups = match &cli.command {
        Command::Adapt { groups, .. } | Command::Eval { groups, .. } => groups.as_deref(),
        _ => None,
    };
    if let Some(list) = groups {
        let set = GroupSet::parse(list)?;
        let names = set.iter().map(|g| Value::String(g.name().into())).collect();
        overrides.push(nested(&["tta", "groups"], Value::Array(names)));
    }
    if let Command::Train { no_ssl: true, .. } = cli.command {
        let mut losses = Table::new();
        for (k, on) in [("id", true), ("pos", false), ("mat", false)] {
            losses.insert(k.into(), Value::Boolean(on));
        }
        overrides.push(nested(&["train", "losses"], Value::Table(losses)));
    }
    if let Command::Eval { splits: Some(n), .. } | Command::Ablate { splits: Some(n), .. } = cli.command {
        overrides.push(nested(&["eval", "splits"], Value::Integer(i64::try_from(n)?)));
    }
    Ok(RunConfig::build(cli.config.as_deref(), &overrides)?)
}

/// `data` is either a manifest file or a dataset root holding `<part>/manifest.json`.
fn manifest_path(data: &Path, part: &str) -> Result<PathBuf> {
    let path = if data.is_dir() {
        data.join(part).join(manifest::FILE_NAME)
    } else {
        data.to_path_buf()
    };
    ensure!(path.is_file(), "dataset manifest {} not found", path.display());
    Ok(path)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = ["warn", "info", "debug", "trace"][usize::from(cli.verbose).min(3)];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let run = run_config(&cli)?;
    let started = Instant::now();
    let name = match &cli.command {
        Command::Gen { out } => {
            gen(&run, out)?;
            "gen"
        }
        Command::Train { data, out, .. } => {
            train(&run, data, out)?;
            "train"
        }
        Command::Adapt {
            checkpoint,
            data,
            out,
            split,
            ..
        } => {
            adapt(&run, checkpoint, data, out, *split)?;
            "adapt"
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            adapt,
            probe_bn,
            ..
        } => {
            eval(&run, checkpoint, data, out, *adapt, probe_bn.as_deref())?;
            "eval"
        }
        Command::Ablate { data, out, sweeps, .. } => {
            ablate(&run, data, out, &Sweep::parse_list(sweeps)?)?;
            "ablate"
        }
    };
    println!("{name}: finished in {:.2} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn gen(run: &RunConfig, out: &Path) -> Result<()> {
    let bench = build_benchmark(&run.data)?;
    let names: Vec<String> = run.data.sources.iter().map(|d| d.name.clone()).collect();
    let train_manifest = manifest::save_train(&out.join("train"), &bench.train, &names)?;
    let test_manifest = manifest::save_test(&out.join("test"), &bench.test, &run.data.target.name)?;
    run.echo(out)?;

    let train = manifest::load_manifest(&train_manifest)?;
    let test = manifest::load_manifest(&test_manifest)?;
    ensure!(train.counts.train == bench.train.len(), "training manifest lost records");
    ensure!(
        test.counts.probe == run.data.test_ids && test.counts.probe + test.counts.gallery == bench.test.images.len(),
        "test manifest lost records"
    );

    let rgb = |m: [f64; 3]| format!("{:.3} {:.3} {:.3}", m[0], m[1], m[2]);
    let mut rows = Vec::new();
    for (d, name) in names.iter().enumerate() {
        let idx: Vec<usize> = (0..bench.train.len()).filter(|&i| bench.train.domains[i] == d).collect();
        let images: Vec<_> = idx.iter().map(|&i| bench.train.images[i].clone()).collect();
        rows.push(vec![
            "train".into(),
            name.clone(),
            run.data.train_ids.to_string(),
            images.len().to_string(),
            "-".into(),
            "-".into(),
            rgb(synth::channel_means(&images).map(f64::from)),
        ]);
    }
    rows.push(vec![
        "test".into(),
        run.data.target.name.clone(),
        run.data.test_ids.to_string(),
        bench.test.images.len().to_string(),
        test.counts.probe.to_string(),
        test.counts.gallery.to_string(),
        rgb(synth::channel_means(&bench.test.images).map(f64::from)),
    ]);
    print!(
        "{}",
        report::text_table(&["split", "domain", "ids", "images", "probe", "gallery", "mean RGB"], &rows)
    );
    println!("wrote {} and {}", train_manifest.display(), test_manifest.display());
    Ok(())
}

/// Reload a written checkpoint and compare every tensor hash.
fn verify_checkpoint(path: &Path, model: &bnta_core::model::ModelBundle) -> Result<()> {
    let back = checkpoint::load(path)?;
    ensure!(
        checkpoint::tensor_hashes(&back.model) == checkpoint::tensor_hashes(model),
        "{} does not read back identically",
        path.display()
    );
    Ok(())
}

fn train(run: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let set = manifest::load_train(&manifest_path(data, "train")?)?;
    let (model, log) = experiment::train(run, &set)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&model, run.seed, &ckpt)?;
    report::write_csv(&out.join("train_log.csv"), &log)?;
    run.echo(out)?;
    verify_checkpoint(&ckpt, &model)?;
    if let Some(last) = log.last() {
        println!(
            "train: {} images, {} epochs, final loss {:.4} (id {:.4}, pos {:.4}, mat {:.4})",
            set.len(),
            log.len(),
            last.total,
            last.id,
            last.pos,
            last.mat
        );
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn adapt(run: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path, split: usize) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let pool = manifest::load_test(&manifest_path(data, "test")?)?;
    let s = pool.split(split, run.seed);
    let started = Instant::now();
    let (adapted, rep) = experiment::adapt_on_split(&ckpt.model, &pool, &s, &run.tta)?;
    let secs = started.elapsed().as_secs_f64();

    let path = out.join("adapted.ckpt");
    checkpoint::save(&adapted, ckpt.header.seed, &path)?;
    report::write_csv(&out.join("change_rates.csv"), &rep.change_rates)?;
    report::write_csv(&out.join("bn_change_rates.csv"), report::bn_change_rates(&rep.change_rates))?;
    report::write_csv(&out.join("tta_log.csv"), &rep.steps)?;
    bnta::error::write(&out.join("pairs.jsonl"), rep.pairs.to_jsonl().as_bytes())?;
    let changed = checkpoint::diff(&ckpt.model, &adapted)?;
    report::write_json(&out.join("changed_tensors.json"), &changed)?;
    run.echo(out)?;
    verify_checkpoint(&path, &adapted)?;
    let outside = experiment::unselected_changes(&ckpt.model, &adapted, run.tta.groups)?;
    ensure!(outside.is_empty(), "tensors outside the selected groups changed: {outside:?}");

    println!(
        "adapt: {} gallery images, {} pairs, {} steps, groups {}, {} tensors changed, {secs:.2} s",
        s.gallery.len(),
        rep.pairs.len(),
        rep.steps.len(),
        run.tta.groups.to_list(),
        changed.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    tool_version: &'a str,
    checkpoint_seed: u64,
    evaluation: &'a Evaluation,
    bn_shift: Option<&'a ShiftComparison>,
}

fn probe_layer(spec: &str, model: &bnta_core::model::ModelBundle) -> Result<usize> {
    let layers = model.bn_layers().len();
    let layer = if spec == "last" {
        model.last_extractor_bn()
    } else {
        spec.parse().with_context(|| format!("--probe-bn expects a layer index or `last`, got `{spec}`"))?
    };
    if layer >= layers {
        bail!("unknown BN layer {layer}: the model has {layers} (0-based)");
    }
    Ok(layer)
}

fn eval(run: &RunConfig, ckpt_path: &Path, data: &Path, out: &Path, with_tta: bool, probe: Option<&str>) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let pool = manifest::load_test(&manifest_path(data, "test")?)?;
    let evaluation = experiment::evaluate(&ckpt.model, &pool, run, with_tta.then_some(&run.tta))?;

    let shift = match probe {
        Some(spec) => {
            let layer = probe_layer(spec, &ckpt.model)?;
            let source = manifest::load_train(&manifest_path(data, "train")?)?.images;
            let adapted = if with_tta {
                Some(experiment::adapt_on_split(&ckpt.model, &pool, &pool.split(0, run.seed), &run.tta)?.0)
            } else {
                None
            };
            let rows = experiment::bn_histogram(
                &ckpt.model,
                adapted.as_ref(),
                layer,
                &source,
                &pool.images,
                run.eval.batch,
                run.eval.histogram_bins,
            )?;
            report::write_csv(&out.join("bn_histogram.csv"), &rows)?;
            Some(experiment::shift_comparison(
                &ckpt.model,
                adapted.as_ref(),
                layer,
                &source,
                &pool.images,
                run.eval.batch,
            )?)
        }
        None => None,
    };

    let doc = EvalReport {
        tool_version: bnta::TOOL_VERSION,
        checkpoint_seed: ckpt.header.seed,
        evaluation: &evaluation,
        bn_shift: shift.as_ref(),
    };
    let report_path = out.join("eval_report.json");
    report::write_json(&report_path, &doc)?;
    report::write_csv(
        &out.join("splits.csv"),
        evaluation.per_split.iter().map(|r| {
            (
                r.split,
                r.frozen.rank1,
                r.frozen.map,
                r.adapted.map(|a| a.rank1),
                r.adapted.map(|a| a.map),
            )
        }),
    )?;
    let mut rows = vec![("frozen", &evaluation.frozen)];
    if let Some(a) = &evaluation.adapted {
        rows.push(("adapted", a));
    }
    let table = report::summary_table(&rows);
    bnta::error::write(&out.join("summary.txt"), table.as_bytes())?;
    run.echo(out)?;
    serde_json::from_slice::<serde_json::Value>(&std::fs::read(&report_path)?)
        .with_context(|| format!("{} does not parse back", report_path.display()))?;

    println!("{} splits, features {}", evaluation.splits, if run.eval.normalize { "L2-normalized" } else { "raw" });
    print!("{table}");
    if let Some(s) = &shift {
        println!(
            "BN layer {} ({}): frozen shift {:.4}{}",
            s.layer,
            s.layer_name.as_deref().unwrap_or("?"),
            s.frozen.shift.moment_gap,
            s.adapted
                .as_ref()
                .map_or(String::new(), |a| format!(", adapted shift {:.4}", a.shift.moment_gap))
        );
    }
    Ok(())
}

fn ablate(run: &RunConfig, data: &Path, out: &Path, sweeps: &[Sweep]) -> Result<()> {
    let train = manifest::load_train(&manifest_path(data, "train")?)?;
    let pool = manifest::load_test(&manifest_path(data, "test")?)?;
    let outcome = ablate::run_sweeps(run, &train, &pool, sweeps, out)?;
    let combined = out.join(ablate::COMBINED_CSV);
    let rows = csv::Reader::from_path(&combined)?.records().count();
    ensure!(rows == outcome.results.len(), "{} has {rows} rows, expected {}", combined.display(), outcome.results.len());
    let leaks: Vec<&str> = outcome
        .results
        .iter()
        .filter(|r| !r.unselected_changes.is_empty())
        .map(|r| r.cell.as_str())
        .collect();
    ensure!(leaks.is_empty(), "unselected tensors changed in cells {leaks:?}");
    print!("{}", ablate::results_table(&outcome.results));
    println!(
        "ablate: {} cells ({} run, {} reused); wrote {}",
        outcome.results.len(),
        outcome.ran,
        outcome.reused,
        combined.display()
    );
    Ok(())
}
