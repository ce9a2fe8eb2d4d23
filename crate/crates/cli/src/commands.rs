use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mutud::config::{RunConfig, CODEBOOK_GRID};
use mutud::diagnostics::{codebook_usage, collect_features, efficiency_report, separation_of, similarity_study};
use mutud::models::{PreparedScene, VariantKind};
use mutud::training::checkpoint;
use mutud::training::{eval_row, evaluate, metrics_csv, train as train_model, EvalRow, TrainedModel};

use crate::dataset::{self, Manifest};
use crate::exit::{Classify, Failure, Kind};

fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let base = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).data()?;
    }
    fs::write(path, contents).map_err(|e| Failure::new(Kind::Data, anyhow::anyhow!("{}: {e}", path.display())))
}

fn data_dir(cfg: &RunConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| Path::new(&cfg.io.out_dir).join("data"))
}

pub fn generate(config: Option<&Path>, overrides: &[String], out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = resolve(config, overrides)?;
    let dir = data_dir(&cfg, out);
    let manifest = dataset::generate_dataset(&cfg, &dir)?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;
    println!(
        "wrote {} train and {} test scenes to {}",
        manifest.train.len(),
        manifest.test.len(),
        dir.display()
    );
    Ok(())
}

struct Splits {
    train: Vec<PreparedScene>,
    test: Vec<PreparedScene>,
    train_seeds: HashSet<u64>,
}

fn load_splits(cfg: &RunConfig, dir: &Path, need_train: bool) -> Result<Splits, Failure> {
    let manifest: Manifest = dataset::read_manifest(dir)?;
    dataset::check_compatible(&manifest, cfg)?;
    let train = if need_train { dataset::load_entries(dir, "train", &manifest.train)? } else { Vec::new() };
    Ok(Splits {
        train,
        test: dataset::load_entries(dir, "test", &manifest.test)?,
        train_seeds: manifest.train.iter().map(|e| e.seed).collect(),
    })
}

fn eval_csv(table: &[EvalRow]) -> String {
    let mut out = String::from("snr_db,mean_si_sdr_improvement,std,count\n");
    for r in table {
        let _ = writeln!(out, "{},{},{},{}", r.snr_db, r.mean, r.std, r.count);
    }
    out
}

fn eval_text(table: &[EvalRow]) -> String {
    let mut out = format!("{:>7} {:>10} {:>8} {:>6}\n", "snr", "mean", "std", "count");
    for r in table {
        let _ = writeln!(out, "{:>7} {:>10.3} {:>8.3} {:>6}", r.snr_db, r.mean, r.std, r.count);
    }
    out
}

/// Train one config and evaluate it; returns the model and per-SNR table.
fn train_and_eval(cfg: &RunConfig, splits: &Splits, run_dir: &Path) -> Result<(TrainedModel, Vec<EvalRow>), Failure> {
    let mut model = TrainedModel::init(cfg)?;
    let mut rows = train_model(&mut model, &splits.train)?;
    let table = evaluate(&model, &splits.test, &cfg.scene.snr_list, &splits.train_seeds)?;
    let last = rows.last().map_or((0, 0), |r| (r.step, r.epoch));
    rows.push(eval_row(last.0, last.1, &table));
    write(&run_dir.join("metrics.csv"), metrics_csv(&rows, &cfg.scene.snr_list))?;
    write(&run_dir.join("config.toml"), cfg.to_toml_string())?;
    write(&run_dir.join("eval.csv"), eval_csv(&table))?;
    checkpoint::save(&model, &run_dir.join("checkpoint.bin"))?;
    Ok((model, table))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.io.out_dir).join("runs").join(format!("{}-{}", cfg.model.variant.name(), &cfg.hash()[..12]))
}

pub fn train(config: Option<&Path>, overrides: &[String], data: Option<PathBuf>, force: bool) -> Result<(), Failure> {
    let cfg = resolve(config, overrides)?;
    let dir = run_dir(&cfg);
    if dir.join("checkpoint.bin").exists() && !force {
        return Err(Failure::new(
            Kind::Config,
            anyhow::anyhow!("{} already holds a run with this config hash (use --force to replace it)", dir.display()),
        ));
    }
    let splits = load_splits(&cfg, &data_dir(&cfg, data), true)?;
    let (model, table) = train_and_eval(&cfg, &splits, &dir)?;
    println!(
        "{} trained for {} steps ({} skipped); outputs in {}",
        cfg.model.variant.name(),
        model.optimizer.step,
        model.optimizer.skipped,
        dir.display()
    );
    print!("{}", eval_text(&table));
    Ok(())
}

fn checkpoint_config_hash(checkpoint: &Path) -> Result<Option<String>, Failure> {
    let beside = checkpoint.with_file_name("config.toml");
    if !beside.exists() {
        return Ok(None);
    }
    Ok(Some(RunConfig::load(&beside)?.hash()))
}

pub fn eval(checkpoint_path: &Path, data: Option<PathBuf>, out: Option<PathBuf>, force: bool) -> Result<(), Failure> {
    let expected = checkpoint_config_hash(checkpoint_path)?;
    let model = checkpoint::load(checkpoint_path, expected.as_deref(), force)?;
    let cfg = model.config.clone();
    let splits = load_splits(&cfg, &data_dir(&cfg, data), false)?;
    let table = evaluate(&model, &splits.test, &cfg.scene.snr_list, &splits.train_seeds)?;
    let out = out.unwrap_or_else(|| checkpoint_path.with_file_name("eval.csv"));
    write(&out, eval_csv(&table))?;
    print!("{}", eval_text(&table));
    Ok(())
}

pub fn ablate(config: Option<&Path>, overrides: &[String], data: Option<PathBuf>) -> Result<(), Failure> {
    let base = resolve(config, overrides)?.with_variant(VariantKind::Mutud);
    let splits = load_splits(&base, &data_dir(&base, data), true)?;
    let root = Path::new(&base.io.out_dir).join("ablation");
    let snrs = base.scene.snr_list.clone();
    let mut csv = String::from("n");
    let mut text = format!("{:>4}", "N");
    for s in &snrs {
        let _ = write!(csv, ",si_sdr_improvement@{s}");
        let _ = write!(text, " {:>9}", format!("{s} dB"));
    }
    csv.push('\n');
    text.push('\n');
    for n in CODEBOOK_GRID {
        let mut cfg = base.clone();
        cfg.tame.n = n;
        cfg.validate()?;
        let (_, table) = train_and_eval(&cfg, &splits, &root.join(format!("n{n}")))?;
        let _ = write!(csv, "{n}");
        let _ = write!(text, "{n:>4}");
        for r in &table {
            let _ = write!(csv, ",{}", r.mean);
            let _ = write!(text, " {:>9.3}", r.mean);
        }
        csv.push('\n');
        text.push('\n');
    }
    text.push_str("\nreference expectation at corpus scale: gains grow with N up to 32 and level off at 64\n");
    write(&root.join("codebook.csv"), &csv)?;
    write(&root.join("codebook.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

pub fn report(checkpoint_path: &Path, data: Option<PathBuf>) -> Result<(), Failure> {
    let model = checkpoint::load(checkpoint_path, None, false)?;
    let cfg = model.config.clone();
    let dir = Path::new(&cfg.io.out_dir).join("reports");
    let eff = efficiency_report(&cfg)?;
    write(&dir.join("efficiency.json"), json(&eff))?;
    write(&dir.join("efficiency.txt"), eff.to_text())?;
    write(&dir.join("config.toml"), cfg.to_toml_string())?;
    print!("{}", eff.to_text());
    if cfg.model.variant != VariantKind::Mutud {
        println!("{} has no TAME module; similarity and usage reports skipped", cfg.model.variant.name());
        return Ok(());
    }
    let splits = load_splits(&cfg, &data_dir(&cfg, data), false)?;
    let features = collect_features(&model, &splits.test)?;
    let sim = similarity_study(&features, &cfg.scene.snr_list)?;
    write(&dir.join("similarity.json"), json(&sim))?;
    write(&dir.join("similarity.csv"), sim.to_csv())?;
    write(&dir.join("similarity.txt"), sim.to_text())?;
    let usage = codebook_usage(&model, &features)?;
    write(&dir.join("usage.json"), json(&usage))?;
    write(&dir.join("usage.csv"), usage.to_csv())?;
    write(&dir.join("usage.txt"), usage.to_text())?;
    let sep = separation_of(&features)?;
    write(&dir.join("separation.json"), json(&sep))?;
    write(&dir.join("separation.txt"), sep.to_text())?;
    print!("{}{}{}", sim.to_text(), usage.to_text(), sep.to_text());
    println!("reports in {}", dir.display());
    Ok(())
}
