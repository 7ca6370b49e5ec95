use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pla_core::{
    evaluate, generate, init_checkpoint, quadratic_minimum, quadratic_objective, run_pla, split,
    trace_csv, train_fixed, tune_demo, Checkpoint, EmbeddingHead, LabeledDataset, Objective, Pca,
    QueryGallerySplit, RunAborted, RunOutcome, SplitTag, TrainMode, TrainSet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    if !path.exists() {
        bail!(
            "dataset {} does not exist; create it with `pla gen-data`",
            path.display()
        );
    }
    LabeledDataset::load(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

/// Generates and splits the synthetic dataset, seeded by `data.seed`.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = generate(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let ds = split(&ds, cfg.split.query_per_identity, cfg.split.mode, &mut rng)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    ds.save(&path)?;
    println!(
        "wrote {} rows ({} train, {} query, {} gallery), {} identities, dim {} to {}",
        ds.len(),
        ds.indices(SplitTag::Train).len(),
        ds.indices(SplitTag::Query).len(),
        ds.indices(SplitTag::Gallery).len(),
        ds.identities().len(),
        ds.dim(),
        path.display()
    );
    Ok(path)
}

/// Trains one mode on the dataset's training rows and writes the report and
/// checkpoints under `<out_dir>/<mode>/`.
pub fn train(cfg: &RunConfig, mode: TrainMode) -> Result<PathBuf> {
    let ds = load_dataset(&cfg.dataset_path())?;
    let data = TrainSet::from_dataset(&ds)?;
    if data.class_count() < cfg.pla.batch_spec.identities {
        bail!(
            "{} training identities but batches need {}",
            data.class_count(),
            cfg.pla.batch_spec.identities
        );
    }
    let init = init_checkpoint(cfg.model_shape(ds.dim(), data.class_count()), cfg.seed)?;
    let dir = cfg.out_dir.join(mode.as_str());
    create_dir(&dir)?;
    write(&dir.join("config.toml"), &toml::to_string(cfg)?)?;

    let result = match mode {
        TrainMode::Pla => run_pla(&data, &cfg.pla, &cfg.optimizer, &cfg.bounds, init, cfg.seed),
        _ => {
            let obj = Objective::for_mode(mode, cfg.fixed_params()?, cfg.pla.metric)?;
            let epochs = cfg.fixed_epochs();
            train_fixed(
                &data,
                &obj,
                mode,
                epochs,
                &cfg.pla.batch_spec,
                &cfg.optimizer,
                init,
                cfg.seed,
            )
        }
    };
    let outcome = match result {
        Ok(o) => o,
        Err(RunAborted { source, report }) => {
            report.write_dir(&dir)?;
            return Err(source).context(format!(
                "training aborted; partial report in {}",
                dir.display()
            ));
        }
    };
    let RunOutcome { best, last, report } = outcome;
    report.write_dir(&dir)?;
    best.save(dir.join("best.ckpt"))?;
    last.save(dir.join("last.ckpt"))?;

    println!("mode {mode}: {} epochs", report.total_epochs);
    if let Some(l) = report.final_loss() {
        println!("final epoch loss {l:.6}");
    }
    if let Some(b) = report.best_loss {
        println!("best tracked loss {b:.6}");
    }
    for r in &report.rounds {
        println!(
            "round {}: chose {} for {} epochs",
            r.round, r.chosen, r.exploit_epochs
        );
    }
    println!("wrote {}", dir.display());
    Ok(dir)
}

/// Embeds query and gallery rows, optionally reduces them with a PCA fitted
/// on the training rows (gallery rows when there are none), and writes
/// `metrics.csv` and `cmc.csv` into `out`.
pub fn eval(
    checkpoint: &Path,
    dataset: &Path,
    target_dim: Option<usize>,
    head: EmbeddingHead,
    out: &Path,
) -> Result<PathBuf> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let state = Checkpoint::load(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let ds = load_dataset(dataset)?;
    if ds.dim() != state.model.shape().input_dim {
        bail!(
            "dataset has {} features but the checkpoint expects {}",
            ds.dim(),
            state.model.shape().input_dim
        );
    }
    let embed = |tag| {
        let (x, labels) = ds.subset(tag);
        state.model.embed(&x, head).map(|e| (e, labels))
    };
    let (mut q, ql) = embed(SplitTag::Query)?;
    let (mut g, gl) = embed(SplitTag::Gallery)?;
    if let Some(t) = target_dim {
        let (train, _) = embed(SplitTag::Train)?;
        let pca = Pca::fit(if train.nrows() > 0 { &train } else { &g }, t)?;
        q = pca.project(&q)?;
        g = pca.project(&g)?;
    }
    let metrics = evaluate(&QueryGallerySplit::new(q, ql, g, gl)?)?;
    create_dir(out)?;
    write(&out.join("metrics.csv"), &metrics.summary_csv())?;
    write(&out.join("cmc.csv"), &metrics.cmc_csv())?;
    println!(
        "rank-1 {:.4}  mAP {:.4}  ({} queries, {} without a gallery match)",
        metrics.rank1, metrics.map, metrics.evaluated_queries, metrics.excluded_queries
    );
    println!("wrote {}", out.display());
    Ok(out.to_path_buf())
}

/// Runs the search against the quadratic bowl over `bounds` and writes
/// `trace.csv` into `out_dir`.
pub fn tune(cfg: &RunConfig) -> Result<PathBuf> {
    let bounds = &cfg.bounds;
    let trace = tune_demo(bounds, &cfg.tune_settings(), |w| {
        quadratic_objective(w, bounds)
    })?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("trace.csv");
    write(&path, &trace_csv(&trace))?;
    let last = trace.last().expect("initial design is never empty");
    let minimum = quadratic_minimum(bounds);
    println!(
        "{} evaluations; best {:.6}, attainable minimum {minimum:.6}, gap {:.6}",
        trace.len(),
        last.best_so_far,
        last.best_so_far - minimum
    );
    println!("wrote {}", path.display());
    Ok(path)
}
