//! `sar-retrieval`: generate data, train, embed, query and evaluate.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use config::{require, require_dir, require_parent, RunConfig, SplitKind};
use sar_retrieval::contrastive::{load_training, save_training, write_history_csv, OptimizerKind, TrainConfig, TrainState};
use sar_retrieval::datagen::{self, read_manifest, ManifestEntry, Role, MANIFEST_NAME};
use sar_retrieval::encoder::{forward, load_checkpoint, FeatureVector, ParamSet};
use sar_retrieval::eval::{evaluate, EvalOptions, EvalQuery, EvalReport};
use sar_retrieval::index::{EmbeddingIndex, PatchRecord};
use sar_retrieval::raster::read_raster;
use sar_retrieval::{Error, ErrorKind, Result};

#[derive(Parser, Debug)]
#[command(name = "sar-retrieval", version, about = "Self-supervised SAR patch retrieval")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and write key and query patches plus a manifest.
    Datagen(DatagenArgs),
    /// Train the primary encoder on the key patches of a dataset.
    Train(TrainArgs),
    /// Embed the key patches of a dataset into an index file.
    Embed(EmbedArgs),
    /// Rank the index against one image.
    Query(QueryArgs),
    /// Score the dataset's queries against an index.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct DatagenArgs {
    /// Existing directory that receives `manifest.json` and `patches/`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitKind>,
    #[arg(long)]
    scene_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    key_stride: Option<usize>,
    #[arg(long)]
    n_queries: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-epoch loss history (defaults to the checkpoint path with `.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from the checkpoint and its `.saro` sidecar.
    #[arg(long)]
    resume: bool,
    /// K = 256 and 30 epochs, applied before the flags below.
    #[arg(long)]
    desk_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `.rstr` or 8-bit binary PGM.
    #[arg(long)]
    image: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    /// Drop the record whose id equals the image file stem.
    #[arg(long)]
    exclude_self: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// JSON report; the text table goes next to it with `.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50")]
    ns: Vec<usize>,
    /// Minimum overlap as a fraction of the smaller footprint.
    #[arg(long, default_value_t = 0.0)]
    min_overlap: f64,
    /// Keep index records whose id equals the query id.
    #[arg(long)]
    keep_self: bool,
    /// Row label in the text table (defaults to the checkpoint file stem).
    #[arg(long)]
    label: Option<String>,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        _ => Err(format!("unknown optimizer {s:?} (sgd or adam)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    match cli.command {
        Command::Datagen(a) => cmd_datagen(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Embed(a) => cmd_embed(cfg, a),
        Command::Query(a) => cmd_query(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn cmd_datagen(mut cfg: RunConfig, a: DatagenArgs) -> Result<()> {
    set_path(&mut cfg.data_dir, a.out);
    if a.split.is_some() {
        cfg.split_kind = a.split;
    }
    if let Some(s) = a.scene_size {
        cfg.scene.width = s;
        cfg.scene.height = s;
    }
    let out = require(&cfg.data_dir, "output directory")?.to_path_buf();
    require_dir(&out)?;
    let mut spec = cfg.split_spec();
    set(&mut spec.patch_size, a.patch_size);
    set(&mut spec.key_stride, a.key_stride);
    set(&mut spec.n_queries, a.n_queries);

    let seed = cfg.seed.unwrap_or(0);
    let scene = datagen::generate_pass(seed, cfg.scene.width, cfg.scene.height, 0, &cfg.scene.params)?;
    let data = datagen::extract_patches(&scene, &spec)?;

    // stage everything next to the destination, then move it in
    let staging = tempfile::Builder::new().prefix(".datagen-").tempdir_in(&out)?;
    datagen::write_dataset(&scene, &data, staging.path())?;
    let patches = out.join("patches");
    if patches.exists() {
        fs::remove_dir_all(&patches)?;
    }
    fs::rename(staging.path().join("patches"), &patches)?;
    fs::rename(staging.path().join(MANIFEST_NAME), out.join(MANIFEST_NAME))?;
    log::info!("scene {} ({}x{}), split {:?}", scene.name, cfg.scene.width, cfg.scene.height, spec);
    println!(
        "wrote {} key and {} query patches to {}",
        data.keys.len(),
        data.queries.len(),
        out.display()
    );
    Ok(())
}

fn load_role(data_dir: &Path, role: Role) -> Result<Vec<ManifestEntry>> {
    require_dir(data_dir)?;
    let entries: Vec<ManifestEntry> = read_manifest(data_dir.join(MANIFEST_NAME))?
        .into_iter()
        .filter(|e| e.role == role)
        .collect();
    if entries.is_empty() {
        return Err(Error::MalformedFile(format!(
            "manifest in {} lists no {role:?} patches",
            data_dir.display()
        )));
    }
    Ok(entries)
}

fn embed_entries(params: &ParamSet<f32>, entries: &[ManifestEntry], base: &Path) -> Result<Vec<FeatureVector<f32>>> {
    entries
        .par_iter()
        .map(|e| Ok(forward(params, &e.load(base)?)?.0))
        .collect()
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    set_path(&mut cfg.data_dir, a.data);
    set_path(&mut cfg.checkpoint, a.checkpoint);
    set_path(&mut cfg.loss_csv, a.loss_csv);
    let seed = cfg
        .seed
        .ok_or_else(|| Error::InvalidConfig("training requires a seed (--seed or config `seed`)".into()))?;
    let t = &mut cfg.train;
    if a.desk_scale {
        let desk = TrainConfig::desk_scale();
        t.queue_size = desk.queue_size;
        t.max_epochs = desk.max_epochs;
    }
    set(&mut t.max_epochs, a.epochs);
    set(&mut t.eta, a.eta);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.queue_size, a.queue_size);
    set(&mut t.momentum, a.momentum);
    set(&mut t.tau, a.tau);
    set(&mut t.lambda_reg, a.lambda);
    set(&mut t.optimizer, a.optimizer);
    if a.rho.is_some() {
        t.rho = a.rho;
    }
    t.seed = seed;
    set(&mut cfg.arch.dim, a.dim);
    cfg.train.validate()?;

    let data_dir = require(&cfg.data_dir, "data directory")?;
    let checkpoint = require(&cfg.checkpoint, "checkpoint path")?;
    require_parent(checkpoint)?;
    let loss_csv = cfg.loss_csv.clone().unwrap_or_else(|| checkpoint.with_extension("csv"));
    require_parent(&loss_csv)?;

    let entries = load_role(data_dir, Role::Key)?;
    let dataset = entries
        .par_iter()
        .map(|e| e.load(data_dir))
        .collect::<Result<Vec<_>>>()?;

    let mut state = if a.resume {
        let s = load_training::<f32>(checkpoint)?;
        log::info!("resuming after epoch {}", s.epochs_completed);
        s
    } else {
        TrainState::<f32>::init(&cfg.arch, &cfg.train)?
    };
    let arch = state.params_q.arch().clone();
    if let Some(img) = dataset.first() {
        if (img.width(), img.height()) != (arch.input_width, arch.input_height) {
            return Err(Error::ShapeMismatch(format!(
                "patches are {}x{} but the encoder expects {}x{}",
                img.width(),
                img.height(),
                arch.input_width,
                arch.input_height
            )));
        }
    }
    log::info!("training on {} patches for {} epochs", dataset.len(), cfg.train.max_epochs);
    state.run(&dataset, &cfg.train, |_| {})?;
    save_training(&state, checkpoint)?;
    write_history_csv(&state.history, &loss_csv)?;
    match state.history.last() {
        Some(s) => println!("epoch {} mean loss {:.6}", s.epoch, s.mean_loss),
        None => println!("no epochs run; saved initial parameters"),
    }
    Ok(())
}

fn cmd_embed(mut cfg: RunConfig, a: EmbedArgs) -> Result<()> {
    set_path(&mut cfg.data_dir, a.data);
    set_path(&mut cfg.checkpoint, a.checkpoint);
    set_path(&mut cfg.index, a.index);
    let data_dir = require(&cfg.data_dir, "data directory")?;
    let params = load_checkpoint::<f32>(require(&cfg.checkpoint, "checkpoint path")?)?;
    let index_path = require(&cfg.index, "index path")?;
    require_parent(index_path)?;

    let entries = load_role(data_dir, Role::Key)?;
    let vectors = embed_entries(&params, &entries, data_dir)?;
    let mut index = EmbeddingIndex::new(params.arch().dim);
    for (e, vector) in entries.into_iter().zip(vectors) {
        index.add(PatchRecord {
            id: e.id,
            footprint: e.footprint,
            vector,
            source_scene: e.scene,
        })?;
    }
    index.save(index_path)?;
    println!("indexed {} patches into {}", index.len(), index_path.display());
    Ok(())
}

fn cmd_query(mut cfg: RunConfig, a: QueryArgs) -> Result<()> {
    set_path(&mut cfg.index, a.index);
    set_path(&mut cfg.checkpoint, a.checkpoint);
    let index = EmbeddingIndex::load(require(&cfg.index, "index path")?)?;
    let params = load_checkpoint::<f32>(require(&cfg.checkpoint, "checkpoint path")?)?;
    let (q, _) = forward(&params, &read_raster(&a.image)?)?;
    let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned());
    let exclude = if a.exclude_self { stem.as_deref() } else { None };
    for (rank, hit) in index.query_excluding(&q, a.k, exclude)?.iter().enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, hit.id, hit.score);
    }
    Ok(())
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    set_path(&mut cfg.data_dir, a.data);
    set_path(&mut cfg.checkpoint, a.checkpoint);
    set_path(&mut cfg.index, a.index);
    set_path(&mut cfg.report, a.report);
    let data_dir = require(&cfg.data_dir, "data directory")?;
    let checkpoint = require(&cfg.checkpoint, "checkpoint path")?;
    let params = load_checkpoint::<f32>(checkpoint)?;
    let index = EmbeddingIndex::load(require(&cfg.index, "index path")?)?;
    if let Some(r) = &cfg.report {
        require_parent(r)?;
    }

    let entries = load_role(data_dir, Role::Query)?;
    let vectors = embed_entries(&params, &entries, data_dir)?;
    let queries: Vec<EvalQuery> = entries
        .into_iter()
        .zip(vectors)
        .map(|(e, vector)| EvalQuery {
            id: e.id,
            footprint: e.footprint,
            vector,
        })
        .collect();
    let opts = EvalOptions {
        ns: a.ns,
        min_overlap: a.min_overlap,
        exclude_self: !a.keep_self,
    };
    let report = evaluate(&index, &queries, &opts)?;
    let label = a.label.unwrap_or_else(|| {
        checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "encoder".into())
    });
    let table = EvalReport::table(&[(&label, &report)]);
    if let Some(path) = &cfg.report {
        report.write_json(path)?;
        write_text(&path.with_extension("txt"), &table)?;
    }
    if !report.excluded.is_empty() {
        log::warn!("{} queries had no relevant record", report.excluded.len());
    }
    print!("{table}");
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, text.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
