//! One function per subcommand. Each reads its stage inputs from disk and
//! writes JSON or CSV artifacts under the output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use bsdp_core::cluster::{cluster_drop_offs, ClusterSet};
use bsdp_core::eval::{
    fold_prediction_score, kfold_prediction_scores, kfold_splits, mean_score, pairwise_comembership_auc,
    MetricsReport, PairScores,
};
use bsdp_core::geo::{GeoPoint, Haversine};
use bsdp_core::ggnn::{encode_sequence, predict_next_vector, train_ggnn, Checkpoint};
use bsdp_core::graph::{build_graph_sequence, build_station_graph, remove_inferior, GraphOptions, GraphSequence, StationGraph};
use bsdp_core::ingest::{
    extract_positions, parse_trajectory_csv, partition_spatiotemporal, write_trajectory_csv, Granularity, ParseMode,
    Partition, Regions, TrajectoryRecord,
};
use bsdp_core::recommend::{fine_tune_layout, read_legal_positions, write_legal_positions};
use bsdp_core::synth::{generate_synthetic_city, label_positions, GroundTruth};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::CliError;

pub struct Ctx {
    pub cfg: PipelineConfig,
    /// Abort on the first malformed row or out-of-region ride.
    pub strict: bool,
}

/// Files written by a stage, plus notes on anything skipped.
#[derive(Debug, Default, Serialize)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl StageOutput {
    pub fn extend(&mut self, other: StageOutput) {
        self.artifacts.extend(other.artifacts);
        self.notes.extend(other.notes);
    }
}

type Result<T> = std::result::Result<T, CliError>;

const CLUSTERS_FILE: &str = "clusters.json";
const GRAPHS_DIR: &str = "graphs";
const SEQUENCES_DIR: &str = "sequences";
const MODELS_DIR: &str = "models";
const PREDICTIONS_DIR: &str = "predictions";
const RECOMMENDATIONS_DIR: &str = "recommendations";
const METRICS_DIR: &str = "metrics";

fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut w = create(path)?;
    let res = if pretty { serde_json::to_writer_pretty(&mut w, value) } else { serde_json::to_writer(&mut w, value) };
    res.map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| CliError::Format { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Clears a directory this tool owns so stale per-region files never
/// leak into a later stage.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Region ids become file names, so they are restricted to a safe set.
fn check_region_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id != "." && id != ".." && id.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(CliError::Contract(format!("region id {id:?} must use only letters, digits, '_', '.' and '-'")))
    }
}

/// `<dir>/<region>.json` files, sorted by region id.
fn region_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(CliError::MissingInput(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn synth(ctx: &Ctx) -> Result<StageOutput> {
    let cfg = ctx.cfg.synth.clone().unwrap_or_default();
    check_region_id(&cfg.region_id)?;
    let city = generate_synthetic_city(&cfg)?;
    let paths = &ctx.cfg.paths;
    let mut out = StageOutput::default();

    let traj = paths.trajectories();
    let mut w = create(&traj)?;
    write_trajectory_csv(&mut w, &city.all_records())?;
    w.flush().map_err(|e| CliError::io(&traj, e))?;
    out.artifacts.push(traj);

    let truth = paths.ground_truth();
    write_json(&truth, &city.truth, false)?;
    out.artifacts.push(truth);

    let legal = paths.legal_positions();
    let mut w = create(&legal)?;
    write_legal_positions(&mut w, &city.legal_positions)?;
    w.flush().map_err(|e| CliError::io(&legal, e))?;
    out.artifacts.push(legal);

    let regions = paths.regions();
    write_json(&regions, &vec![city.region.clone()], true)?;
    out.artifacts.push(regions);
    Ok(out)
}

#[derive(Debug, Serialize)]
struct RowIssue {
    line: u64,
    message: String,
}

#[derive(Debug, Serialize)]
struct SubsetSize {
    region_id: String,
    period_index: i64,
    records: usize,
}

#[derive(Debug, Serialize)]
struct IngestReport {
    records: usize,
    row_errors: Vec<RowIssue>,
    outside_regions: usize,
    subsets: Vec<SubsetSize>,
}

/// Reads the trajectory file and splits it into (region, period) subsets.
fn load_partition(ctx: &Ctx) -> Result<(Partition, IngestReport)> {
    let paths = &ctx.cfg.paths;
    let traj = paths.trajectories();
    let mode = if ctx.strict { ParseMode::Strict } else { ParseMode::Lenient };
    let parsed = parse_trajectory_csv(BufReader::new(open(&traj)?), mode).map_err(|e| match e {
        bsdp_core::ingest::IngestError::Row { line, message } => {
            CliError::Format { path: traj.clone(), message: format!("line {line}: {message}") }
        }
        other => CliError::Ingest(other),
    })?;
    let region_file = paths.regions();
    let regions = if paths.regions.is_some() || region_file.exists() {
        let text = fs::read_to_string(&region_file).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(region_file.clone()),
            _ => CliError::io(&region_file, e),
        })?;
        Regions::from_json(&text)?
    } else {
        Regions::Whole("all".into())
    };
    let part = partition_spatiotemporal(&parsed.records, &regions, ctx.cfg.graph.granularity)?;
    if ctx.strict && !part.rejected.is_empty() {
        return Err(CliError::Contract(format!("{} rides depart outside every region", part.rejected.len())));
    }
    for key in part.buckets.keys() {
        check_region_id(&key.region_id)?;
    }
    let report = IngestReport {
        records: parsed.records.len(),
        row_errors: parsed.errors.iter().map(|e| RowIssue { line: e.line, message: e.message.clone() }).collect(),
        outside_regions: part.rejected.len(),
        subsets: part
            .buckets
            .iter()
            .map(|(k, v)| SubsetSize { region_id: k.region_id.clone(), period_index: k.period_index, records: v.len() })
            .collect(),
    };
    Ok((part, report))
}

/// Clustering result of one (region, period) subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetClusters {
    pub region_id: String,
    pub period_index: i64,
    pub granularity: Granularity,
    pub clusters: ClusterSet<GeoPoint>,
}

pub fn cluster(ctx: &Ctx) -> Result<StageOutput> {
    let (part, report) = load_partition(ctx)?;
    let params = ctx.cfg.cluster;
    let buckets: Vec<_> = part.buckets.iter().collect();
    let results: Vec<SubsetClusters> = buckets
        .par_iter()
        .map(|(key, records)| {
            let positions = extract_positions(records)?;
            let clusters = cluster_drop_offs(&positions.locations(), &params, &Haversine)?;
            Ok(SubsetClusters {
                region_id: key.region_id.clone(),
                period_index: key.period_index,
                granularity: key.granularity,
                clusters,
            })
        })
        .collect::<Result<_>>()?;

    let paths = &ctx.cfg.paths;
    let mut out = StageOutput::default();
    let report_path = paths.out("ingest_report.json");
    write_json(&report_path, &report, true)?;
    out.artifacts.push(report_path);
    if !report.row_errors.is_empty() {
        out.notes.push(format!("skipped {} malformed rows", report.row_errors.len()));
    }
    if report.outside_regions > 0 {
        out.notes.push(format!("{} rides depart outside every region", report.outside_regions));
    }

    let clusters_path = paths.out(CLUSTERS_FILE);
    write_json(&clusters_path, &results, false)?;
    out.artifacts.push(clusters_path);

    let summary = paths.out("cluster_summary.csv");
    write_csv(
        &summary,
        &["region_id", "period_index", "points", "clusters", "outliers", "theta_rho", "theta_delta", "no_centers"],
        results.iter().map(|s| {
            let c = &s.clusters;
            vec![
                s.region_id.clone(),
                s.period_index.to_string(),
                c.points.len().to_string(),
                c.cluster_count().to_string(),
                c.outlier_count().to_string(),
                c.theta_rho.to_string(),
                c.theta_delta.to_string(),
                c.no_centers.to_string(),
            ]
        }),
    )?;
    out.artifacts.push(summary);

    let plot = paths.out("decision_graph.csv");
    write_csv(
        &plot,
        &["region_id", "period_index", "point", "lat", "lon", "rho", "delta", "label", "center"],
        results.iter().flat_map(|s| {
            let c = &s.clusters;
            (0..c.points.len()).map(move |i| {
                vec![
                    s.region_id.clone(),
                    s.period_index.to_string(),
                    i.to_string(),
                    c.points[i].lat().to_string(),
                    c.points[i].lon().to_string(),
                    c.rho[i].to_string(),
                    c.delta[i].to_string(),
                    c.labels[i].map(|l| l.to_string()).unwrap_or_default(),
                    u8::from(c.centers.contains(&i)).to_string(),
                ]
            })
        }),
    )?;
    out.artifacts.push(plot);
    Ok(out)
}

fn load_clusters(ctx: &Ctx) -> Result<BTreeMap<(String, i64), ClusterSet<GeoPoint>>> {
    let subsets: Vec<SubsetClusters> = read_json(&ctx.cfg.paths.out(CLUSTERS_FILE))?;
    Ok(subsets.into_iter().map(|s| ((s.region_id, s.period_index), s.clusters)).collect())
}

struct BuiltGraph {
    region_id: String,
    period_index: i64,
    built: usize,
    graph: StationGraph,
    theta_p: f64,
    theta_u: f64,
}

pub fn graph(ctx: &Ctx) -> Result<StageOutput> {
    let (part, _) = load_partition(ctx)?;
    let mut clusters = load_clusters(ctx)?;
    let opts = GraphOptions { min_station_size: ctx.cfg.min_station_size(), snapshot: None };
    let alpha = ctx.cfg.graph.alpha;
    let jobs: Vec<(&String, i64, &Vec<TrajectoryRecord>, ClusterSet<GeoPoint>)> = part
        .buckets
        .iter()
        .map(|(key, records)| {
            let set = clusters.remove(&(key.region_id.clone(), key.period_index)).ok_or_else(|| {
                CliError::Contract(format!("{CLUSTERS_FILE} has no subset for region {} period {}", key.region_id, key.period_index))
            })?;
            Ok((&key.region_id, key.period_index, records, set))
        })
        .collect::<Result<_>>()?;
    if let Some((region, period)) = clusters.keys().next() {
        return Err(CliError::Contract(format!("{CLUSTERS_FILE} has subset region {region} period {period} absent from the trajectories")));
    }
    let built: Vec<BuiltGraph> = jobs
        .par_iter()
        .map(|(region, period, records, set)| {
            let positions = extract_positions(records)?;
            if set.points != positions.locations() {
                return Err(CliError::Contract(format!(
                    "{CLUSTERS_FILE} points for region {region} period {period} do not match the trajectories"
                )));
            }
            let full = build_station_graph(&positions, set, records, &opts)?;
            let (theta_p, theta_u) = ctx.cfg.graph.thresholds.resolve(&full, alpha);
            let graph = remove_inferior(&full, theta_p, theta_u, alpha);
            Ok(BuiltGraph { region_id: region.to_string(), period_index: *period, built: full.len(), graph, theta_p, theta_u })
        })
        .collect::<Result<_>>()?;

    let paths = &ctx.cfg.paths;
    let dir = paths.out(GRAPHS_DIR);
    reset_dir(&dir)?;
    let mut out = StageOutput::default();
    for b in &built {
        let path = dir.join(&b.region_id).join(format!("{}.json", b.period_index));
        write_json(&path, &b.graph, true)?;
        out.artifacts.push(path);
    }
    let summary = paths.out("graph_summary.csv");
    write_csv(
        &summary,
        &["region_id", "period_index", "stations_built", "stations_kept", "edges", "bikes", "theta_p", "theta_u"],
        built.iter().map(|b| {
            vec![
                b.region_id.clone(),
                b.period_index.to_string(),
                b.built.to_string(),
                b.graph.len().to_string(),
                b.graph.edges().count().to_string(),
                b.graph.total_bikes().to_string(),
                b.theta_p.to_string(),
                b.theta_u.to_string(),
            ]
        }),
    )?;
    out.artifacts.push(summary);
    Ok(out)
}

pub fn sequence(ctx: &Ctx) -> Result<StageOutput> {
    let paths = &ctx.cfg.paths;
    let graphs_dir = paths.out(GRAPHS_DIR);
    if !graphs_dir.is_dir() {
        return Err(CliError::MissingInput(graphs_dir));
    }
    let mut regions: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&graphs_dir).map_err(|e| CliError::io(&graphs_dir, e))? {
        let path = entry.map_err(|e| CliError::io(&graphs_dir, e))?.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                regions.push((name.to_string(), path.clone()));
            }
        }
    }
    regions.sort();

    let dir = paths.out(SEQUENCES_DIR);
    reset_dir(&dir)?;
    let mut out = StageOutput::default();
    for (region, rdir) in regions {
        let mut graphs = BTreeMap::new();
        for (stem, path) in region_files(&rdir)? {
            let period: i64 = stem
                .parse()
                .map_err(|_| CliError::Format { path: path.clone(), message: "file name is not a period index".into() })?;
            graphs.insert(period, read_json::<StationGraph>(&path)?);
        }
        let seq = match build_graph_sequence(graphs, region.clone(), ctx.cfg.graph.granularity, &ctx.cfg.grid) {
            Ok(s) => s,
            Err(e @ bsdp_core::graph::GraphError::InsufficientHistory(_)) if !ctx.strict => {
                out.notes.push(format!("region {region} skipped: {e}"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let path = dir.join(format!("{region}.json"));
        write_json(&path, &seq, false)?;
        out.artifacts.push(path);
        let totals = dir.join(format!("{region}_totals.csv"));
        write_csv(
            &totals,
            &["t", "period_index", "filled", "stations", "bikes"],
            seq.graphs.iter().enumerate().map(|(t, g)| {
                vec![
                    t.to_string(),
                    seq.period_of(t).to_string(),
                    seq.filled[t].to_string(),
                    g.len().to_string(),
                    g.total_bikes().to_string(),
                ]
            }),
        )?;
        out.artifacts.push(totals);
    }
    Ok(out)
}

fn load_sequences(ctx: &Ctx) -> Result<Vec<(String, GraphSequence)>> {
    region_files(&ctx.cfg.paths.out(SEQUENCES_DIR))?
        .into_iter()
        .map(|(region, path)| Ok((region, read_json::<GraphSequence>(&path)?)))
        .collect()
}

pub fn train(ctx: &Ctx) -> Result<StageOutput> {
    let seqs = load_sequences(ctx)?;
    let trained: Vec<(String, Checkpoint, Vec<f64>)> = seqs
        .par_iter()
        .map(|(region, seq)| {
            let outcome = train_ggnn(seq, &ctx.cfg.train)?;
            Ok((region.clone(), Checkpoint::new(&outcome.model, &seq.codec), outcome.loss_history))
        })
        .collect::<Result<_>>()?;
    let dir = ctx.cfg.paths.out(MODELS_DIR);
    reset_dir(&dir)?;
    let mut out = StageOutput::default();
    for (region, ckpt, losses) in &trained {
        let path = dir.join(format!("{region}.json"));
        write_json(&path, ckpt, false)?;
        out.artifacts.push(path);
        let curve = dir.join(format!("{region}_loss.csv"));
        write_csv(&curve, &["epoch", "loss"], losses.iter().enumerate().map(|(e, l)| vec![e.to_string(), l.to_string()]))?;
        out.artifacts.push(curve);
    }
    Ok(out)
}

pub fn predict(ctx: &Ctx) -> Result<StageOutput> {
    let seqs = load_sequences(ctx)?;
    let models_dir = ctx.cfg.paths.out(MODELS_DIR);
    let min_size = ctx.cfg.min_station_size();
    let predicted: Vec<(String, StationGraph, Vec<f64>, GraphSequence)> = seqs
        .into_par_iter()
        .map(|(region, seq)| {
            let ckpt_path = models_dir.join(format!("{region}.json"));
            let (model, codec) = read_json::<Checkpoint>(&ckpt_path)?.into_model()?;
            if codec != seq.codec {
                return Err(CliError::Contract(format!("model for region {region} was trained with a different grid codec")));
            }
            let y = predict_next_vector(&model, &encode_sequence(&seq)?)?.to_vec();
            let g = seq.codec.decode(&y, min_size, &seq.graphs).map_err(bsdp_core::ggnn::GgnnError::from)?;
            Ok((region, g, y, seq))
        })
        .collect::<Result<_>>()?;
    let dir = ctx.cfg.paths.out(PREDICTIONS_DIR);
    reset_dir(&dir)?;
    let mut out = StageOutput::default();
    for (region, g, y, seq) in &predicted {
        let path = dir.join(format!("{region}.json"));
        write_json(&path, g, true)?;
        out.artifacts.push(path);
        let grid = dir.join(format!("{region}_grid.csv"));
        let codec = &seq.codec;
        write_csv(
            &grid,
            &["cell", "row", "col", "lat", "lon", "value", "bikes"],
            y.iter().enumerate().map(|(cell, v)| {
                let c = codec.cell_center(cell);
                vec![
                    cell.to_string(),
                    (cell / codec.cols).to_string(),
                    (cell % codec.cols).to_string(),
                    c.lat().to_string(),
                    c.lon().to_string(),
                    v.to_string(),
                    (v * codec.cap_max).round().to_string(),
                ]
            }),
        )?;
        out.artifacts.push(grid);
    }
    Ok(out)
}

pub fn recommend(ctx: &Ctx) -> Result<StageOutput> {
    let legal_path = ctx.cfg.paths.legal_positions();
    let positions = read_legal_positions(BufReader::new(open(&legal_path)?))?;
    let dir = ctx.cfg.paths.out(RECOMMENDATIONS_DIR);
    let predictions = region_files(&ctx.cfg.paths.out(PREDICTIONS_DIR))?;
    reset_dir(&dir)?;
    let mut out = StageOutput::default();
    for (region, path) in predictions {
        let g: StationGraph = read_json(&path)?;
        let rec = fine_tune_layout(&g, &positions, ctx.cfg.recommend.theta_d)?;
        let json = dir.join(format!("{region}.json"));
        write_json(&json, &rec, true)?;
        out.artifacts.push(json);
        let table = dir.join(format!("{region}.csv"));
        write_csv(
            &table,
            &["id", "lat", "lon", "n", "level", "position_id", "case"],
            rec.stations.iter().map(|s| {
                let quoted = |v: serde_json::Value| v.as_str().map(str::to_string).unwrap_or_default();
                vec![
                    s.id.clone(),
                    s.location.lat().to_string(),
                    s.location.lon().to_string(),
                    s.bikes.to_string(),
                    quoted(serde_json::to_value(s.level).expect("plain enum")),
                    s.position_id.clone(),
                    quoted(serde_json::to_value(s.case).expect("plain enum")),
                ]
            }),
        )?;
        out.artifacts.push(table);
        if rec.unplaced > 0 {
            out.notes.push(format!("region {region}: {} bikes could not be placed", rec.unplaced));
        }
    }
    Ok(out)
}

/// Per-period co-membership AUC of the clusters against synthetic ground
/// truth, for one region. Empty when no ground truth is available.
fn clustering_auc(ctx: &Ctx, region: &str) -> Result<Vec<(i64, Option<f64>)>> {
    let paths = &ctx.cfg.paths;
    let truth_path = paths.ground_truth();
    if paths.ground_truth.is_none() && !truth_path.exists() {
        return Ok(Vec::new());
    }
    let truth: GroundTruth = read_json(&truth_path)?;
    if truth.region_id != region {
        return Ok(Vec::new());
    }
    let (part, _) = load_partition(ctx)?;
    let clusters = load_clusters(ctx)?;
    let mut out = Vec::new();
    for period in &truth.periods {
        let key = (region.to_string(), period.period_index);
        let (Some(set), Some((_, records))) = (
            clusters.get(&key),
            part.buckets.iter().find(|(k, _)| k.region_id == region && k.period_index == period.period_index),
        ) else {
            continue;
        };
        let (_, labels) = label_positions(records, &period.rides).ok_or_else(|| {
            CliError::Contract(format!("ground truth period {} does not match the trajectories", period.period_index))
        })?;
        let auc = match pairwise_comembership_auc(&set.labels, &labels, PairScores::Hard, ctx.cfg.eval.seed) {
            Ok(a) => Some(a),
            Err(bsdp_core::eval::EvalError::UndefinedAuc) => None,
            Err(e) => return Err(e.into()),
        };
        out.push((period.period_index, auc));
    }
    Ok(out)
}

pub fn eval(ctx: &Ctx, fold: Option<usize>) -> Result<StageOutput> {
    let seqs = load_sequences(ctx)?;
    let k = ctx.cfg.eval.k;
    let dir = ctx.cfg.paths.out(METRICS_DIR);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut out = StageOutput::default();

    if let Some(f) = fold {
        let scores: Vec<(String, bsdp_core::eval::FoldScore)> = seqs
            .par_iter()
            .map(|(region, seq)| {
                let xs = encode_sequence(seq)?;
                let plan = kfold_splits(xs.len(), k, ctx.cfg.eval.seed)?;
                Ok((region.clone(), fold_prediction_score(&xs, &plan, f, &ctx.cfg.train)?))
            })
            .collect::<Result<_>>()?;
        for (region, score) in &scores {
            let path = dir.join(format!("{region}_fold{f}.json"));
            write_json(&path, score, true)?;
            out.artifacts.push(path);
        }
        return Ok(out);
    }

    let per_region: Vec<(String, Vec<bsdp_core::eval::FoldScore>)> = seqs
        .par_iter()
        .map(|(region, seq)| {
            let xs = encode_sequence(seq)?;
            let plan = kfold_splits(xs.len(), k, ctx.cfg.eval.seed)?;
            Ok((region.clone(), kfold_prediction_scores(&xs, &plan, &ctx.cfg.train)?))
        })
        .collect::<Result<_>>()?;
    for (region, folds) in per_region {
        let aucs = clustering_auc(ctx, &region)?;
        let defined: Vec<f64> = aucs.iter().filter_map(|(_, a)| *a).collect();
        let auc = (!defined.is_empty()).then(|| mean_score(&defined));
        let report = MetricsReport::from_folds(auc, folds);

        let path = dir.join(format!("{region}.json"));
        write_json(&path, &report, true)?;
        out.artifacts.push(path);
        let curve = dir.join(format!("{region}_folds.csv"));
        write_csv(
            &curve,
            &["fold", "test_periods", "rmse_model", "rmse_persistence"],
            report.per_fold.iter().map(|s| {
                let periods: Vec<String> = s.test_periods.iter().map(|t| t.to_string()).collect();
                vec![s.fold.to_string(), periods.join(";"), opt(s.rmse_model), opt(s.rmse_persistence)]
            }),
        )?;
        out.artifacts.push(curve);
        if !aucs.is_empty() {
            let auc_curve = dir.join(format!("{region}_auc.csv"));
            write_csv(&auc_curve, &["period_index", "auc"], aucs.iter().map(|(p, a)| vec![p.to_string(), opt(*a)]))?;
            out.artifacts.push(auc_curve);
        }
    }
    Ok(out)
}
