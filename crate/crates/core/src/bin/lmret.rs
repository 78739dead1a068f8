//! `lmret`: command-line front end for the retrieval pipeline.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use landmark_retrieval::attention::{self, FeatureBag};
use landmark_retrieval::config::PipelineConfig;
use landmark_retrieval::evaluation::{self, GroundTruth};
use landmark_retrieval::feature::{self, ImageFeatures};
use landmark_retrieval::index;
use landmark_retrieval::pipeline;
use landmark_retrieval::synth;
use landmark_retrieval::Error;

#[derive(Parser, Debug)]
#[command(name = "lmret", version, about = "Local-feature landmark retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic landmark corpus with geotags, distractor queries and training bags.
    Gen(GenArgs),
    /// Train the attention scorer on labeled feature bags.
    TrainAttention(TrainArgs),
    /// Select, reduce and index database features.
    BuildIndex(BuildArgs),
    /// Search the index with query images and verify matches geometrically.
    Query(QueryArgs),
    /// Score a ranked run against geotag ground truth.
    Evaluate(EvalArgs),
    /// Fuse two per-query score lists by a weighted mean of normalized scores.
    Fuse(FuseArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads [default: machine parallelism]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthFlags {
    /// Number of landmarks [default: 50]
    #[arg(long)]
    n_landmarks: Option<usize>,
    /// Database images per landmark [default: 20]
    #[arg(long)]
    images_per_landmark: Option<usize>,
    /// Query images per landmark [default: 2]
    #[arg(long)]
    queries_per_landmark: Option<usize>,
    /// Features per image [default: 100]
    #[arg(long)]
    features_per_image: Option<usize>,
    /// Distinct parts per landmark [default: 150]
    #[arg(long)]
    parts_per_landmark: Option<usize>,
    /// Raw descriptor dimension [default: 64]
    #[arg(long)]
    raw_dim: Option<usize>,
    /// Dimensions carrying landmark structure [default: 32]
    #[arg(long)]
    n_discriminative_dims: Option<usize>,
    /// Descriptor noise standard deviation [default: 0.25]
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Queries with no relevant database image [default: 100]
    #[arg(long)]
    distractor_queries: Option<usize>,
    /// Radius of image geotags around their landmark, km [default: 2]
    #[arg(long)]
    geo_spread_km: Option<f64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    synth: SynthFlags,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Bags JSONL: one {"features": [[..]..], "label": n} per line
    #[arg(long)]
    bags: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV [default: <out>.loss.csv]
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Scorer hidden width [default: 32]
    #[arg(long)]
    hidden: Option<usize>,
    /// SGD learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD steps, one bag each [default: 500]
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct IndexFlags {
    /// Coarse codebook size [default: 8192] (reference setting)
    #[arg(long)]
    coarse_k: Option<usize>,
    /// Most postings in one KD-tree leaf [default: 30000] (reference setting)
    #[arg(long)]
    kd_leaf_max: Option<usize>,
    /// PQ sub-quantizers [default: 10] (reference setting)
    #[arg(long)]
    pq_m: Option<usize>,
    /// Bits per PQ sub-code [default: 5] (reference setting)
    #[arg(long)]
    pq_bits: Option<u32>,
    /// Reduced descriptor dimension [default: 40]
    #[arg(long)]
    descriptor_dim: Option<usize>,
    /// Coarse k-means iterations [default: 20]
    #[arg(long)]
    kmeans_iters: Option<usize>,
    /// PQ k-means iterations [default: 15]
    #[arg(long)]
    pq_iters: Option<usize>,
}

#[derive(Args, Debug)]
struct CapFlag {
    /// Features kept per image, highest score first [default: 1000] (reference setting)
    #[arg(long)]
    feature_cap: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    index: IndexFlags,
    #[command(flatten)]
    cap: CapFlag,
    /// Database features: a JSONL/binary file or a directory of them
    #[arg(long)]
    features: PathBuf,
    /// Attention checkpoint used to score features before selection
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Output index file
    #[arg(long)]
    out: PathBuf,
    /// Build statistics JSON [default: <out>.stats.json]
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    cap: CapFlag,
    /// Index file
    #[arg(long)]
    index: PathBuf,
    /// Query features: a JSONL/binary file or a directory of them
    #[arg(long)]
    queries: PathBuf,
    /// Attention checkpoint used to score query features
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Ranked results JSONL [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Neighbors kept per query descriptor [default: 60] (reference setting)
    #[arg(long)]
    top_k: Option<usize>,
    /// Coarse cells probed per query descriptor [default: 5] (reference setting)
    #[arg(long)]
    soft_assign: Option<usize>,
    /// Leaves scanned per query descriptor [default: 10000] (reference setting)
    #[arg(long)]
    leaf_budget: Option<usize>,
    /// RANSAC iterations [default: 1000]
    #[arg(long)]
    ransac_iters: Option<usize>,
    /// Inlier reprojection tolerance, pixels [default: 3]
    #[arg(long)]
    inlier_tol: Option<f64>,
    /// Fewest inliers for a match to be kept [default: 10]
    #[arg(long)]
    min_inliers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Ranked results JSONL from `query`
    #[arg(long)]
    run: PathBuf,
    /// Database ground truth CSV: image_id,lat,lon,landmark_id
    #[arg(long)]
    db_gt: PathBuf,
    /// Query geotags CSV: query_id,lat,lon
    #[arg(long)]
    queries_gt: PathBuf,
    /// Precision/recall CSV output
    #[arg(long)]
    pr_out: PathBuf,
    /// Summary JSON [default: standard output]
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Relevance radius around a landmark centroid, km [default: 25] (reference setting)
    #[arg(long)]
    gt_threshold_km: Option<f64>,
    /// Fewest photos for a landmark to count [default: 3] (reference setting)
    #[arg(long)]
    min_photos: Option<usize>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    /// Local-feature scores CSV: query_id,image_id,score
    #[arg(long)]
    local: PathBuf,
    /// Global-descriptor scores CSV: query_id,image_id,score
    #[arg(long)]
    global: PathBuf,
    /// Weight of the local scores [default: 0.25] (reference setting)
    #[arg(long, visible_alias = "weight")]
    fusion_weight: Option<f64>,
    /// Fused run JSONL [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn set<T: Copy>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, common.seed);
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn with_path(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File, Error> {
    File::open(path).map_err(with_path(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(with_path(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(with_path(path))?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Reads one features file, or every `.jsonl`/`.dlf` file of a directory
/// in name order.
fn read_features(path: &Path) -> Result<Vec<ImageFeatures>, Error> {
    if !path.is_dir() {
        open(path)?;
        return feature::read_features_file(path);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(with_path(path))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("jsonl" | "dlf")));
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no feature files in {}", path.display())));
    }
    let mut all = Vec::new();
    for f in files {
        all.extend(feature::read_features_file(&f)?);
    }
    Ok(all)
}

fn load_scorer(path: Option<&Path>) -> Result<Option<attention::AttentionScorer>, Error> {
    path.map(|p| {
        open(p)?;
        attention::load_checkpoint(p).map(|m| m.scorer)
    })
    .transpose()
}

fn json_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), Error> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::format("json output", e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    let s = &args.synth;
    set(&mut cfg.n_landmarks, s.n_landmarks);
    set(&mut cfg.images_per_landmark, s.images_per_landmark);
    set(&mut cfg.queries_per_landmark, s.queries_per_landmark);
    set(&mut cfg.features_per_image, s.features_per_image);
    set(&mut cfg.parts_per_landmark, s.parts_per_landmark);
    set(&mut cfg.raw_dim, s.raw_dim);
    set(&mut cfg.n_discriminative_dims, s.n_discriminative_dims);
    set(&mut cfg.noise_sigma, s.noise_sigma);
    set(&mut cfg.distractor_queries, s.distractor_queries);
    set(&mut cfg.geo_spread_km, s.geo_spread_km);
    cfg.validate()?;
    let ds = synth::gen_landmark_dataset(&cfg.synth_config())?;
    std::fs::create_dir_all(&args.out)?;
    let out = |name: &str| create(&args.out.join(name));
    feature::write_jsonl(&ds.db, out("db.jsonl")?)?;
    feature::write_jsonl(&ds.queries, out("queries.jsonl")?)?;
    evaluation::write_gt_csv(&ds.db_geo, out("db_gt.csv")?)?;
    evaluation::write_queries_csv(&ds.query_geo, out("queries_gt.csv")?)?;
    // each database image is a bag labeled with its landmark
    let mut bags = out("bags.jsonl")?;
    for (img, geo) in ds.db.iter().zip(&ds.db_geo) {
        let label = geo
            .landmark_id
            .as_deref()
            .and_then(|l| l.trim_start_matches('L').parse::<usize>().ok())
            .ok_or_else(|| Error::State("generated image without landmark".into()))?;
        let bag = FeatureBag {
            features: img.features.iter().map(|f| f.descriptor.0.clone()).collect(),
            label,
        };
        json_line(&mut bags, &bag)?;
    }
    bags.flush()?;
    log::info!(
        "gen: {} database images, {} queries ({} distractors) in {}",
        ds.db.len(),
        ds.queries.len(),
        cfg.distractor_queries,
        args.out.display()
    );
    Ok(())
}

fn read_bags(path: &Path) -> Result<Vec<FeatureBag>, Error> {
    let reader = BufReader::new(open(path)?);
    let mut bags = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        bags.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format("bags", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(bags)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.hidden, args.hidden);
    set(&mut cfg.lr, args.lr);
    set(&mut cfg.steps, args.steps);
    cfg.validate()?;
    let bags = read_bags(&args.bags)?;
    let (model, trace) = attention::train_attention(&bags, &cfg.train_config())?;
    log::info!(
        "train-attention: loss {:.4} -> {:.4}, training accuracy {:.3}",
        trace[0],
        trace[trace.len() - 1],
        attention::accuracy(&model, &bags)?
    );
    attention::write_checkpoint(&model, create(&args.out)?)?;
    let trace_path = args.trace.unwrap_or_else(|| with_suffix(&args.out, ".loss.csv"));
    let mut w = create(&trace_path)?;
    writeln!(w, "pass,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_build(args: BuildArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    let f = &args.index;
    set(&mut cfg.coarse_k, f.coarse_k);
    set(&mut cfg.kd_leaf_max, f.kd_leaf_max);
    set(&mut cfg.pq_m, f.pq_m);
    set(&mut cfg.pq_bits, f.pq_bits);
    set(&mut cfg.descriptor_dim, f.descriptor_dim);
    set(&mut cfg.kmeans_iters, f.kmeans_iters);
    set(&mut cfg.pq_iters, f.pq_iters);
    set(&mut cfg.feature_cap, args.cap.feature_cap);
    cfg.validate()?;
    let db = read_features(&args.features)?;
    let scorer = load_scorer(args.attention.as_deref())?;
    let idx = pipeline::build_pipeline_index(&db, scorer.as_ref(), &cfg.pipeline_params())?;
    let stats = idx.stats();
    log::info!(
        "build-index: {} descriptors, {} leaves, {} bytes/descriptor",
        stats.descriptors,
        stats.leaves,
        stats.bytes_per_descriptor
    );
    index::write_index(&idx, create(&args.out)?)?;
    let stats_path = args.stats.unwrap_or_else(|| with_suffix(&args.out, ".stats.json"));
    let mut w = create(&stats_path)?;
    serde_json::to_writer_pretty(&mut w, &stats).map_err(|e| Error::format("stats", e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_query(args: QueryArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.feature_cap, args.cap.feature_cap);
    set(&mut cfg.top_k, args.top_k);
    set(&mut cfg.soft_assign, args.soft_assign);
    set(&mut cfg.leaf_budget, args.leaf_budget);
    set(&mut cfg.ransac_iters, args.ransac_iters);
    set(&mut cfg.inlier_tol, args.inlier_tol);
    set(&mut cfg.min_inliers, args.min_inliers);
    cfg.validate()?;
    open(&args.index)?;
    let idx = index::load_index(&args.index)?;
    let queries = read_features(&args.queries)?;
    let scorer = load_scorer(args.attention.as_deref())?;
    let mut params = cfg.pipeline_params();
    params.index = idx.config.clone();
    let records = pipeline::run_queries(&idx, &queries, scorer.as_ref(), &params)?;
    let answered: std::collections::BTreeSet<&str> = records.iter().map(|r| r.query_id.as_str()).collect();
    log::info!(
        "query: {} queries, {} with verified matches, {} result lines",
        queries.len(),
        answered.len(),
        records.len()
    );
    evaluation::write_results_jsonl(&records, output(args.out.as_deref())?)
}

#[derive(Serialize)]
struct Summary {
    queries: usize,
    distractor_queries: usize,
    distractors_rejected: usize,
    mean_average_precision: Option<f64>,
    pr_points: usize,
    max_precision: Option<f64>,
    recall_at_max_precision: usize,
    max_recall: usize,
}

fn cmd_evaluate(args: EvalArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.gt_threshold_km, args.gt_threshold_km);
    set(&mut cfg.min_photos, args.min_photos);
    cfg.validate()?;
    let records = evaluation::read_results_jsonl(BufReader::new(open(&args.run)?))?;
    let db = evaluation::read_gt_csv(open(&args.db_gt)?)?;
    let queries = evaluation::read_queries_csv(open(&args.queries_gt)?)?;
    let gt: GroundTruth = evaluation::build_ground_truth(&db, &queries, cfg.gt_threshold_km, cfg.min_photos)?;
    let full = evaluation::run_from_results(&records);
    // the sweep counts one image per landmark; mAP ranks every returned image
    let run = evaluation::dedup_run(&full, &gt)?;
    let points = evaluation::pr_sweep(&run, &gt);
    evaluation::write_pr_csv(&points, create(&args.pr_out)?)?;
    let distractors: Vec<&String> = gt.relevant.iter().filter(|(_, r)| r.is_empty()).map(|(q, _)| q).collect();
    let rejected = distractors
        .iter()
        .filter(|q| run.get(q.as_str()).map_or(true, Vec::is_empty))
        .count();
    let map = match evaluation::mean_average_precision(&full, &gt) {
        Ok(m) => Some(m),
        Err(Error::InvalidInput(msg)) => {
            log::warn!("evaluate: mAP undefined: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let best = points
        .iter()
        .max_by(|a, b| a.precision.total_cmp(&b.precision).then(a.recall.cmp(&b.recall)));
    let summary = Summary {
        queries: gt.relevant.len(),
        distractor_queries: distractors.len(),
        distractors_rejected: rejected,
        mean_average_precision: map,
        pr_points: points.len(),
        max_precision: best.map(|p| p.precision),
        recall_at_max_precision: best.map_or(0, |p| p.recall),
        max_recall: points.last().map_or(0, |p| p.recall),
    };
    let mut out = output(args.summary.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &summary).map_err(|e| Error::format("summary", e.to_string()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    set(&mut cfg.fusion_weight, args.fusion_weight);
    cfg.validate()?;
    let local = evaluation::read_scores_csv(open(&args.local)?)?;
    let global = evaluation::read_scores_csv(open(&args.global)?)?;
    let fused = evaluation::late_fusion(&local, &global, cfg.fusion_weight)?;
    evaluation::write_run_jsonl(&fused, output(args.out.as_deref())?)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainAttention(a) => cmd_train(a),
        Command::BuildIndex(a) => cmd_build(a),
        Command::Query(a) => cmd_query(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Fuse(a) => cmd_fuse(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lmret: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
