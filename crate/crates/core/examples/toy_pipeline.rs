//! Builds caches for a freshly pretrained toy backbone and prints the
//! evaluation report.

use std::time::Instant;

use layercache::cache::{search, SearchMenus, SelectionRule};
use layercache::calibration::calibrate;
use layercache::engine::{evaluate, CacheEnabledModel, EvalOptions};
use layercache::fixtures::{accuracy, pretrain_backbone, toy_conv_backbone, ImageMixture};
use layercache::medial::{collect, split, SplitRatios};
use layercache::subset::{optimize, record_val_predictions};
use layercache::train::TrainConfig;

fn main() -> layercache::error::Result<()> {
    let t0 = Instant::now();
    let mix = ImageMixture::default();
    let pre_train = mix.generate(2000, 1)?;
    let pre_val = mix.generate(500, 2)?;
    let traffic = mix.generate(2000, 3)?;
    let test = mix.generate(1000, 4)?;
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        max_epochs: 15,
        patience: 3,
        ..TrainConfig::default()
    };
    let graph = pretrain_backbone(&toy_conv_backbone(mix.channels, mix.classes, 0)?, &pre_train, Some(&pre_val), &cfg)?;
    println!("backbone accuracy {:.4} ({:?})", accuracy(&graph, &test)?, t0.elapsed());

    let candidates = graph.identify_candidates(1);
    let mut mds = collect(&graph, &traffic.ids, &traffic.inputs, &candidates)?;
    for md in &mut mds {
        split(md, SplitRatios::default(), 0)?;
    }
    let cache_cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 20,
        ..TrainConfig::default()
    };
    let mut caches = Vec::new();
    for (cand, md) in candidates.iter().zip(&mds) {
        let out = search(cand, md, &SearchMenus::default(), &cache_cfg, SelectionRule::default())?;
        for r in &out.rows {
            println!("{} {} flops {} acc {:.4}{}", r.layer, r.architecture, r.cache_flops, r.val_accuracy, if r.selected { " *" } else { "" });
        }
        if let Some(mut c) = out.selected {
            let rep = calibrate(&mut c, md, 0.02)?;
            println!("  tau {:.3} ece {:.4}->{:.4} theta {:?}", rep.temperature, rep.ece_before, rep.ece_after, rep.threshold);
            caches.push(c);
        }
        println!("  ({:?})", t0.elapsed());
    }
    let record = record_val_predictions(&caches, &mds)?;
    let best = optimize(&record)?;
    println!("best subset {:?} score {}", best.best, best.best_score);
    let enabled = caches.into_iter().filter(|c| best.best.contains(&c.ordinal)).collect();
    let model = CacheEnabledModel::new(graph, enabled, 0.02)?;
    let report = evaluate(&model, &test, EvalOptions { repetitions: 10, ..EvalOptions::default() })?;
    println!("{}", report.to_text());
    println!("total {:?}", t0.elapsed());
    Ok(())
}
