use std::collections::BTreeMap;

use bsdp_core::cluster::{cluster_drop_offs, ClusterParams};
use bsdp_core::geo::Haversine;
use bsdp_core::ggnn::{encode_sequence, predict_next_graph, predict_next_vector, train_ggnn, GridSpec, TrainConfig};
use bsdp_core::graph::{build_graph_sequence, build_station_graph, GraphOptions, GraphSequence, StationGraph};
use bsdp_core::ingest::extract_positions;
use bsdp_core::synth::{generate_synthetic_city, DriftModel, SynthCity, SynthConfig};

fn city(drift: DriftModel, periods: usize, seed: u64) -> SynthCity {
    let cfg = SynthConfig {
        rng_seed: seed,
        n_stations: 20,
        rides_per_period: 400,
        drift,
        n_periods: periods,
        min_separation_km: Some(0.5),
        extra_positions: 0,
        ..Default::default()
    };
    generate_synthetic_city(&cfg).unwrap()
}

fn period_graphs(city: &SynthCity) -> BTreeMap<i64, StationGraph> {
    let params = ClusterParams { cutoff_km: 0.1, rho_fraction: 0.05, delta_fraction: 0.01, min_station_size: 5 };
    let opts = GraphOptions { min_station_size: 5, snapshot: None };
    city.periods
        .iter()
        .map(|p| {
            let positions = extract_positions(&p.records).unwrap();
            let set = cluster_drop_offs(&positions.locations(), &params, &Haversine).unwrap();
            (p.period_index, build_station_graph(&positions, &set, &p.records, &opts).unwrap())
        })
        .collect()
}

/// Sequence of the first `history` periods, plus the held-out graph that follows.
fn split(city: &SynthCity, history: usize) -> (GraphSequence, StationGraph) {
    let mut graphs = period_graphs(city);
    let (&last, _) = graphs.iter().next_back().unwrap();
    let held_out = graphs.remove(&last).unwrap();
    assert_eq!(graphs.len(), history);
    (build_graph_sequence(graphs, "r0", city.truth.granularity, &GridSpec::default()).unwrap(), held_out)
}

#[test]
fn drifting_demand_total_is_tracked() {
    let c = city(DriftModel::LinearDrift { slope: 0.01 }, 31, 5);
    let (seq, _) = split(&c, 30);
    let model = train_ggnn(&seq, &TrainConfig { learning_rate: 0.2, ..Default::default() }).unwrap().model;
    let predicted = predict_next_graph(&model, &seq, 5).unwrap();
    let truth: u64 = c.truth.periods[30].counts.iter().map(|&n| n as u64).sum();
    let got = predicted.total_bikes() as f64;
    let rel = (got - truth as f64).abs() / truth as f64;
    assert!(rel <= 0.15, "predicted {got} bikes, ground truth {truth} ({:.1}% off)", rel * 100.0);
}

#[test]
fn alternating_sequence_beats_persistence() {
    let c = city(DriftModel::Alternating { amplitude: 6 }, 41, 9);
    let (seq, held_out) = split(&c, 40);
    let model = train_ggnn(&seq, &TrainConfig::default()).unwrap().model;
    let xs = encode_sequence(&seq).unwrap();
    let y = predict_next_vector(&model, &xs).unwrap();
    let truth = seq.codec.encode(&held_out).unwrap();
    let last = &xs[xs.len() - 1];
    let differing: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] != last[i]).collect();
    assert!(!differing.is_empty());
    let better = differing.iter().filter(|&&i| (y[i] - truth[i]).abs() < (y[i] - last[i]).abs()).count();
    let share = better as f64 / differing.len() as f64;
    assert!(share >= 0.9, "closer to the alternant in {better} of {} cells", differing.len());
}
