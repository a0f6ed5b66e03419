use cgnet::data::{compute_means, gen_synthetic, Manifest};
use cgnet::eval::evaluate;
use cgnet::model::{Network, NetworkConfig, SurMode};
use cgnet::rng::Pcg32;
use cgnet::train::{train_loop, AdamState, CheckpointSink, TrainConfig};

fn run(train: &Manifest, val: &Manifest, sur: SurMode, glo: bool, seed: u64) -> f64 {
    let dataset = train.load_samples().unwrap();
    let means = compute_means(train).unwrap();
    let net_cfg = NetworkConfig {
        num_classes: 4,
        blocks_stage2: 3,
        blocks_stage3: 3,
        stage_channels: [16, 32, 64],
        sur_mode: sur,
        use_glo: glo,
        ..Default::default()
    };
    let mut net = Network::<f32>::build(net_cfg, &mut Pcg32::new(seed, 0)).unwrap();
    let cfg = TrainConfig {
        max_iter: 1000,
        batch_size: 4,
        crop: 96,
        scales: vec![1.0],
        means,
        seed,
        ..Default::default()
    };
    let mut state = AdamState::default();
    train_loop(&mut net, &mut state, &dataset, &cfg, &CheckpointSink::default(), |_| {}).unwrap();
    evaluate(&net, val, &means, None).unwrap().mean_iou
}

#[test]
fn ablation_size96() {
    let td = tempfile::tempdir().unwrap();
    let vd = tempfile::tempdir().unwrap();
    let train = gen_synthetic(21, 100, 96, 4, td.path()).unwrap();
    let val = gen_synthetic(22, 30, 96, 4, vd.path()).unwrap();
    for seed in [1u64, 2, 3] {
        let f = run(&train, &val, SurMode::Full, true, seed);
        let n = run(&train, &val, SurMode::None, true, seed);
        let g = run(&train, &val, SurMode::Full, false, seed);
        println!("seed {seed}: full {f:.4} none {n:.4} glo_off {g:.4}");
    }
}
