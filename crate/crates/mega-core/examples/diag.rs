// Temporary diagnostic: conditioning strength vs training recipe (deleted before ship).
use mega_core::body::dataset::make_dataset;
use mega_core::body::render_observation;
use mega_core::body::skeleton::Skeleton;
use mega_core::metrics::{mesh_errors, vertex_sd};
use mega_core::model::MegaModel;
use mega_core::pipeline::{pretrain, train_conditioned, ConditionedData, TrainOpts, item_seed, masked_token_accuracy};
use mega_core::sampler::{generate_deterministic, generate_stochastic, GenerationConfig};
use mega_core::tokenizer::{encode_mesh, fit_tokenizer};
use mega_core::{MaskingMode, RunConfig};
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let sk = Skeleton::default_body();
    let train = make_dataset(&sk, 4000, 0.3, 0).unwrap();
    let test = make_dataset(&sk, 128, 0.3, 1).unwrap();
    let clean = make_dataset(&sk, 50, 0.0, 5).unwrap();
    let meshes: Vec<_> = train.iter().map(|r| r.canonical.clone()).collect();
    let tok = fit_tokenizer(&meshes, &sk, 24, 6, 64, 0).unwrap();
    let tokens: Vec<_> = train.iter().map(|r| encode_mesh(&tok, &r.canonical).unwrap()).collect();
    let data = ConditionedData::from_records(&train, &tok, &sk).unwrap();
    let rings = sk.keypoint_rings();

    // Mechanical check: full-mask overfit on 32 items.
    let t0 = Instant::now();
    let small = ConditionedData::from_records(&train[..32], &tok, &sk).unwrap();
    let mut m0 = MegaModel::new(cfg.model_config(), 5).unwrap();
    let opts0 = TrainOpts { epochs: 500, batch_size: 8, base_lr: 1e-3, warmup_epochs: 10,
        beta1: 0.9, beta2: 0.99, weight_decay: 0.05, masking: MaskingMode::Full, seed: 55 };
    train_conditioned(&mut m0, &small, &opts0, &mut std::io::sink()).unwrap();
    let (acc, ce) = masked_token_accuracy(&m0, &small).unwrap();
    println!("overfit32 full-mask 2000 steps: acc {:.1}% ce {:.4} ({:.0}s)", acc*100.0, ce, t0.elapsed().as_secs_f64());

    let eval = |model: &MegaModel, tag: &str| {
        let mut det = 0.0;
        for rec in test.iter().take(64) {
            let (_, m) = generate_deterministic(model, &tok, &rec.observation).unwrap();
            det += mesh_errors(&m, &rec.canonical, rings).unwrap().0 / 64.0;
        }
        let mut higher = 0;
        let mut sd_c_mean = 0.0;
        let mut sd_o_mean = 0.0;
        for (i, rec) in clean.iter().enumerate() {
            let occl: Vec<usize> = (0..12).filter(|j| (i*7 + j*5) % 12 < 6).take(6).collect();
            let obs_occ = render_observation(&rec.canonical, &rec.params.root_rotation, &rec.camera, &occl, &sk);
            let gen = GenerationConfig::stochastic(5, 1.0, 25, item_seed(99, i));
            let sc = generate_stochastic(model, &tok, &rec.observation, &gen).unwrap();
            let so = generate_stochastic(model, &tok, &obs_occ, &gen).unwrap();
            let sd_c = vertex_sd(&sc.into_iter().map(|(_, m)| m).collect::<Vec<_>>()).unwrap().1;
            let sd_o = vertex_sd(&so.into_iter().map(|(_, m)| m).collect::<Vec<_>>()).unwrap().1;
            sd_c_mean += sd_c / 50.0;
            sd_o_mean += sd_o / 50.0;
            if sd_o > sd_c { higher += 1; }
        }
        println!("{tag}: detPVE {det:.1}  sd_clean {sd_c_mean:.1} sd_occl {sd_o_mean:.1}  occl_higher {higher}/50");
    };

    // Recipe A: pretrain 3 + cosine train, eval every 3 epochs.
    let mut ma = MegaModel::new(cfg.model_config(), 0).unwrap();
    let pre_opts = TrainOpts { epochs: 3, batch_size: 64, base_lr: 1e-3, warmup_epochs: 1,
        beta1: 0.9, beta2: 0.99, weight_decay: 0.05, masking: MaskingMode::Cosine, seed: 100 };
    let t0 = Instant::now();
    pretrain(&mut ma, &tokens, &pre_opts, &mut std::io::sink()).unwrap();
    println!("pretrain3: {:.0}s", t0.elapsed().as_secs_f64());
    for round in 0..4 {
        let opts = TrainOpts { epochs: 3, seed: 200 + round, ..pre_opts.clone() };
        let t0 = Instant::now();
        let st = train_conditioned(&mut ma, &data, &opts, &mut std::io::sink()).unwrap();
        println!("cosine train rounds {}..{}: loss -> {:.3} ({:.0}s)", round*3, round*3+3, st.final_epoch_loss, t0.elapsed().as_secs_f64());
        eval(&ma, &format!("A pretrain3+cos{}", (round+1)*3));
    }
}
