//! Trains one fold of a small model on synthetic discs and rates the ensemble.
//!
//! cargo run --release -p cxr-nodule --example learn -- [dim] [base] [count] [epochs] [lr]

use std::time::Instant;

use cxr_nodule::dataio::{make_folds, synthesize_nodule_mask};
use cxr_nodule::ednet::{ModelSpec, NormMode};
use cxr_nodule::ensemble::EpochTriplet;
use cxr_nodule::rater::{aggregate, rate_image, RaterConfig};
use cxr_nodule::synth::{synth_dataset, SynthConfig};
use cxr_nodule::trainer::{train_fold, Sample, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map_or(128, |s| s.parse().unwrap());
    let base: usize = args.get(2).map_or(4, |s| s.parse().unwrap());
    let count: usize = args.get(3).map_or(200, |s| s.parse().unwrap());
    let epochs: usize = args.get(4).map_or(10, |s| s.parse().unwrap());
    let lr: f64 = args.get(5).map_or(1e-3, |s| s.parse().unwrap());
    let recs = synth_dataset(&SynthConfig { count, dim, ..Default::default() });
    let samples: Vec<Sample> = recs
        .iter()
        .map(|r| Sample {
            image_id: r.image_id.clone(),
            image: r.pixels.clone(),
            target: synthesize_nodule_mask(r.annotation.as_ref().unwrap(), dim, dim).mask,
        })
        .collect();
    let ids: Vec<&str> = recs.iter().map(|r| r.image_id.as_str()).collect();
    let plan = make_folds(&ids, 10, 0).unwrap();
    let spec = ModelSpec::scaled(5, base, NormMode::Instance, dim);
    let cfg = TrainConfig { learning_rate: lr, max_epochs: epochs, batch_size: Some(4), ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let run = train_fold(&spec, &samples, &plan, 0, &cfg, dir.path(), "x").unwrap();
    println!("train {:?} optimal {}", t.elapsed(), run.optimal_epoch);
    for m in &run.metrics {
        println!("{m:?}");
    }
    let tri = EpochTriplet::load(run.optimal_epoch, |e| run.checkpoints.get(e - 1).cloned()).unwrap();
    let rater = RaterConfig::default();
    let results: Vec<_> = run
        .split
        .test
        .iter()
        .map(|id| {
            let r = recs.iter().find(|r| &r.image_id == id).unwrap();
            let c = tri.predict(&r.pixels).unwrap();
            rate_image(id, &c, r.annotation.as_ref(), &rater)
        })
        .collect();
    println!("{:?}", aggregate(&results).unwrap());
}
