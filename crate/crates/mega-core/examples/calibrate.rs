// Temporary calibration probe for acceptance budgets (deleted before ship).
use mega_core::body::dataset::make_dataset;
use mega_core::body::render_observation;
use mega_core::body::skeleton::Skeleton;
use mega_core::metrics::{mesh_errors, vertex_sd, mean_mesh, mesh_distance};
use mega_core::model::MegaModel;
use mega_core::pipeline::{pretrain, train_conditioned, ConditionedData, TrainOpts, item_seed};
use mega_core::sampler::{generate_deterministic, generate_stochastic, GenerationConfig};
use mega_core::tokenizer::{encode_mesh, fit_tokenizer};
use mega_core::{MaskingMode, RunConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let tr_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let count: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10_000);

    let cfg = RunConfig::default();
    let sk = Skeleton::default_body();
    let t0 = Instant::now();
    let train = make_dataset(&sk, count, 0.3, 0).unwrap();
    let test = make_dataset(&sk, 512, 0.3, 1).unwrap();
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let meshes: Vec<_> = train.iter().map(|r| r.canonical.clone()).collect();
    let tok = fit_tokenizer(&meshes, &sk, 24, 6, 64, 0).unwrap();
    println!("fit: {:.1}s", t0.elapsed().as_secs_f64());

    let mut model = MegaModel::new(cfg.model_config(), 0).unwrap();
    let tokens: Vec<_> = train.iter().map(|r| encode_mesh(&tok, &r.canonical).unwrap()).collect();
    let opts = TrainOpts {
        epochs: pre_epochs, batch_size: 64, base_lr: 1e-3, warmup_epochs: 1,
        beta1: 0.9, beta2: 0.99, weight_decay: 0.05, masking: MaskingMode::Cosine, seed: 100,
    };
    let t0 = Instant::now();
    let stats = pretrain(&mut model, &tokens, &opts, &mut std::io::sink()).unwrap();
    println!("pretrain {} epochs: {:.1}s  loss {:.3} -> {:.3} (ln S = {:.3})",
        pre_epochs, t0.elapsed().as_secs_f64(), stats.first_epoch_loss, stats.final_epoch_loss, (64f64).ln());

    let data = ConditionedData::from_records(&train, &tok, &sk).unwrap();
    let opts = TrainOpts { epochs: tr_epochs, seed: 200, ..opts };
    let t0 = Instant::now();
    let stats = train_conditioned(&mut model, &data, &opts, &mut std::io::sink()).unwrap();
    println!("train {} epochs: {:.1}s  loss {:.3} -> {:.3}",
        tr_epochs, t0.elapsed().as_secs_f64(), stats.first_epoch_loss, stats.final_epoch_loss);

    // AC6: best-of-Q improvement on 512 occluded test items.
    let rings = sk.keypoint_rings();
    let t0 = Instant::now();
    let mut best1 = 0.0;
    let mut best25 = 0.0;
    let mut det_pve = 0.0;
    for (i, rec) in test.iter().enumerate() {
        let (_, dmesh) = generate_deterministic(&model, &tok, &rec.observation).unwrap();
        det_pve += mesh_errors(&dmesh, &rec.canonical, rings).unwrap().0;
        let gen = GenerationConfig::stochastic(5, 1.0, 25, item_seed(42, i));
        let samples = generate_stochastic(&model, &tok, &rec.observation, &gen).unwrap();
        let errs: Vec<f64> = samples.iter().map(|(_, m)| mesh_errors(m, &rec.canonical, rings).unwrap().0).collect();
        best1 += errs[0];
        best25 += errs.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let n = test.len() as f64;
    println!("eval512: {:.1}s  det PVE {:.2}  best1 {:.2}  best25 {:.2}  improvement {:.1}%",
        t0.elapsed().as_secs_f64(), det_pve/n, best1/n, best25/n, (best1-best25)/best1*100.0);

    // AC7: dist-to-det over Q in {1,10,100} on 64 items.
    let t0 = Instant::now();
    let mut dists = [0.0; 3];
    for (i, rec) in test.iter().take(64).enumerate() {
        let (_, dmesh) = generate_deterministic(&model, &tok, &rec.observation).unwrap();
        let gen = GenerationConfig::stochastic(5, 1.0, 100, item_seed(77, i));
        let samples = generate_stochastic(&model, &tok, &rec.observation, &gen).unwrap();
        let meshes: Vec<_> = samples.into_iter().map(|(_, m)| m).collect();
        for (j, q) in [1usize, 10, 100].iter().enumerate() {
            let mm = mean_mesh(&meshes[..*q]).unwrap();
            dists[j] += mesh_distance(&mm, &dmesh).unwrap() / 64.0;
        }
    }
    println!("dist-to-det (Q=1,10,100): {:.2} {:.2} {:.2}  ({:.1}s)", dists[0], dists[1], dists[2], t0.elapsed().as_secs_f64());

    // AC8: occluded vs unoccluded twins, 100 pairs, Q=16.
    let t0 = Instant::now();
    let clean = make_dataset(&sk, 100, 0.0, 5).unwrap();
    let mut higher = 0;
    for (i, rec) in clean.iter().enumerate() {
        let occl: Vec<usize> = vec![(i % 12), (i*5+3) % 12, (i*7+1) % 12, (i*3+8) % 12];
        let obs_occ = render_observation(&rec.canonical, &rec.params.root_rotation, &rec.camera, &occl, &sk);
        let q = 16;
        let gen = GenerationConfig::stochastic(5, 1.0, q, item_seed(99, i));
        let s_clean = generate_stochastic(&model, &tok, &rec.observation, &gen).unwrap();
        let s_occ = generate_stochastic(&model, &tok, &obs_occ, &gen).unwrap();
        let sd_clean = vertex_sd(&s_clean.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>()).unwrap().1;
        let sd_occ = vertex_sd(&s_occ.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>()).unwrap().1;
        if sd_occ > sd_clean { higher += 1; }
    }
    println!("AC8 occluded-SD-higher: {}/100  ({:.1}s)", higher, t0.elapsed().as_secs_f64());
}
