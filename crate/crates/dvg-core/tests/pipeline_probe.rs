//! Temporary full-scale pipeline probe, not part of the suite.

use std::time::Instant;

use dvg_core::dvg::{sample_pairs, train_dvg_step, FipHandle, GeneratorBundle};
use dvg_core::hfr::{
    extract_features, pretrain_fip, train_hfr, FipConfig, HfrConfig, RecognizerBundle,
};
use dvg_core::metrics::{mean_pair_distance, rank1, vr_at_far, FeatureSetStats, frechet_distance, ScoreSet};
use dvg_core::nn::{Optimizer, OptimizerKind};
use dvg_core::rng::RandomSource;
use dvg_core::synthdata::{build_dataset, gather_images, DatasetSpec, Modality, PairRecord, PairedDataset};
use dvg_core::tensor::Tensor;

fn batch_indices(rng: &mut RandomSource, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.index(len)).collect()
}

fn train_dvg_full(
    dataset: &PairedDataset,
    fip: &FipHandle,
    master: &RandomSource,
    steps: u64,
    dist_weight: f64,
    tag: &str,
) -> GeneratorBundle {
    let mut init = master.derive("dvg/init");
    let mut bundle = GeneratorBundle::new(1024, 32, &mut init);
    bundle.weights.dist = dist_weight;
    let mut opt_gen = Optimizer::new(OptimizerKind::adam(2e-4), &bundle.gen_param_sizes());
    let mut opt_disc = Optimizer::new(OptimizerKind::adam(2e-4), &bundle.disc_param_sizes());
    let mut rng = master.derive("dvg/steps");
    let t0 = Instant::now();
    for step in 0..steps {
        let idx = batch_indices(&mut rng, dataset.train.len(), 32);
        let xn = gather_images(&dataset.train, &idx, Modality::N);
        let xv = gather_images(&dataset.train, &idx, Modality::V);
        let rep = train_dvg_step(&mut bundle, fip, &xn, &xv, &mut opt_gen, &mut opt_disc, &mut rng)
            .expect("step");
        if step % 500 == 0 || step + 1 == steps {
            println!(
                "  [{tag}] step {step}: total {:.1} rec {:.1} kl {:.2} dist {:.3} ip_pair {:.4} ip_rec {:.4} div {:.3} adv_g {:.3} adv_d {:.3} ({:.0}s)",
                rep.total, rep.rec, rep.kl, rep.dist, rep.ip_pair, rep.ip_rec, rep.div,
                rep.adv_gen, rep.adv_disc, t0.elapsed().as_secs_f64()
            );
        }
    }
    bundle
}

fn mismatched_pairs(test: &[PairRecord], spp: usize) -> Vec<PairRecord> {
    let len = test.len();
    (0..len)
        .map(|i| {
            let j = (i + spp) % len;
            assert_ne!(test[i].identity, test[j].identity);
            PairRecord { identity: test[i].identity, n: test[i].n.clone(), v: test[j].v.clone() }
        })
        .collect()
}

fn fip_md(fip: &FipHandle, pairs: &[PairRecord]) -> f64 {
    mean_pair_distance(pairs, |imgs: &Tensor| fip.features_tensor(imgs)).unwrap()
}

struct EvalOut {
    rank1: f64,
    vr1: f64,
    vr01: f64,
}

fn evaluate(bundle: &RecognizerBundle, dataset: &PairedDataset) -> EvalOut {
    let idxs: Vec<usize> = (0..dataset.test.len()).collect();
    let gallery = extract_features(bundle, &gather_images(&dataset.test, &idxs, Modality::V));
    let probes = extract_features(bundle, &gather_images(&dataset.test, &idxs, Modality::N));
    let ids: Vec<u32> = dataset.test.iter().map(|p| p.identity).collect();
    let gvecs: Vec<Vec<f64>> = (0..gallery.shape()[0]).map(|r| gallery.row(r).to_vec()).collect();
    let pvecs: Vec<Vec<f64>> = (0..probes.shape()[0]).map(|r| probes.row(r).to_vec()).collect();
    let acc = rank1(&gvecs, &ids, &pvecs, &ids).unwrap();
    let mut scores = ScoreSet::default();
    for (p, pid) in pvecs.iter().zip(&ids) {
        for (g, gid) in gvecs.iter().zip(&ids) {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            if pid == gid {
                scores.genuine.push(dot);
            } else {
                scores.impostors.push(dot);
            }
        }
    }
    EvalOut {
        rank1: acc,
        vr1: vr_at_far(&scores, 0.01).unwrap(),
        vr01: vr_at_far(&scores, 0.001).unwrap(),
    }
}

#[test]
#[ignore]
fn probe_full_pipeline() {
    let dataset = build_dataset(&DatasetSpec::with_seed(7));
    let master = RandomSource::from_master(7);
    let t0 = Instant::now();
    let (fip, report) =
        pretrain_fip(&dataset, &FipConfig::default(), &master.derive("fip")).expect("gate");
    println!(
        "fip: {:.0}s holdout_v {:.3} holdout_n {:.3}",
        t0.elapsed().as_secs_f64(),
        report.holdout_top1_v,
        report.holdout_top1_n
    );

    // Full DVG training at defaults.
    let bundle = train_dvg_full(&dataset, &fip, &master, 4000, 50.0, "full");
    let pool = sample_pairs(&bundle, 10_000, &master.derive("pool"));

    let md_gen = fip_md(&fip, &pool);
    let md_real = fip_md(&fip, &dataset.test);
    let md_mis = fip_md(&fip, &mismatched_pairs(&dataset.test, dataset.samples_per_identity));
    println!(
        "MD: generated {md_gen:.4} real {md_real:.4} mismatched {md_mis:.4} | gen/real {:.3} gen/mis {:.3}",
        md_gen / md_real,
        md_gen / md_mis
    );

    // FID of generated vs real (test split), per modality, fip features.
    let idxs: Vec<usize> = (0..dataset.test.len()).collect();
    let pool_idxs: Vec<usize> = (0..2000).collect();
    for m in [Modality::N, Modality::V] {
        let real = fip.features_tensor(&gather_images(&dataset.test, &idxs, m));
        let gen = fip.features_tensor(&gather_images(&pool, &pool_idxs, m));
        let to_vecs = |t: &Tensor| (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let fid = frechet_distance(
            &FeatureSetStats::from_features(&to_vecs(&real)).unwrap(),
            &FeatureSetStats::from_features(&to_vecs(&gen)).unwrap(),
        )
        .unwrap();
        println!("FID {m:?}: {fid:.4}");
    }

    // HFR baseline vs pool, shared init.
    let class_count = 100;
    let mut init = master.derive("hfr/init");
    let base_bundle = RecognizerBundle::from_pretrained(&fip, class_count, &mut init);
    let mut cfg = HfrConfig::default();

    let t0 = Instant::now();
    let mut baseline = base_bundle.clone();
    cfg.alpha1 = 0.0;
    let logs_b =
        train_hfr(&mut baseline, &dataset, &[], &cfg, &mut master.derive("hfr/steps")).unwrap();
    println!("hfr baseline: {:.0}s final cls {:.4}", t0.elapsed().as_secs_f64(), logs_b.last().unwrap().cls);
    let eb = evaluate(&baseline, &dataset);
    println!("baseline: rank1 {:.4} vr1 {:.4} vr01 {:.4}", eb.rank1, eb.vr1, eb.vr01);

    let t0 = Instant::now();
    let mut dvg_run = base_bundle.clone();
    cfg.alpha1 = 0.001;
    let logs_p =
        train_hfr(&mut dvg_run, &dataset, &pool, &cfg, &mut master.derive("hfr/steps")).unwrap();
    let tenth = logs_p.len() / 10;
    let first: f64 = logs_p[..tenth].iter().map(|l| l.pair).sum::<f64>() / tenth as f64;
    let last: f64 = logs_p[logs_p.len() - tenth..].iter().map(|l| l.pair).sum::<f64>() / tenth as f64;
    println!(
        "hfr pool: {:.0}s final cls {:.4} pair first10% {first:.4} last10% {last:.4}",
        t0.elapsed().as_secs_f64(),
        logs_p.last().unwrap().cls
    );
    let ep = evaluate(&dvg_run, &dataset);
    println!("pool:     rank1 {:.4} vr1 {:.4} vr01 {:.4}", ep.rank1, ep.vr1, ep.vr01);
    println!("margin: {:+.2} points", (ep.rank1 - eb.rank1) * 100.0);
}
