use hma_core::imaging::{degrade, synthetic_texture, PatchPair};
use hma_core::model::{is_head_param, HmaConfig, HmaModel};
use hma_core::training::{
    adam_step, loss_trace_csv, lr_at, train_loop, transfer_parameters, AdamState, Checkpoint, TrainConfig, TrainEvent,
};
use hma_core::{Error, Model32, ParamStore, Tensor};

fn pairs(n: u64, side: usize) -> Vec<PatchPair> {
    (0..n)
        .map(|s| {
            let hr = synthetic_texture(side, side, s).unwrap();
            PatchPair { lr: degrade(&hr, 2).unwrap(), hr }
        })
        .collect()
}

fn quick_cfg(iters: u64) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch: 2,
        lr0: 1e-3,
        milestones: vec![2],
        patch_lr: 8,
        seed: 5,
        augment: true,
        log_every: 1,
    }
}

fn same_params(a: &Model32, b: &Model32) -> bool {
    a.params.iter().zip(b.params.iter()).all(|(p, q)| p.name == q.name && p.value.data() == q.value.data())
}

#[test]
fn published_schedules() {
    let pre = TrainConfig::pretrain();
    assert_eq!(pre.total_iters, 800_000);
    assert_eq!(pre.milestones, vec![300_000, 500_000, 650_000, 700_000, 750_000]);
    assert_eq!(pre.lr0, 2e-4);
    let fine = TrainConfig::finetune();
    assert_eq!(fine.total_iters, 250_000);
    assert_eq!(fine.milestones, vec![125_000, 200_000, 230_000, 240_000]);
    assert_eq!(fine.lr0, 5e-6);
    assert_eq!(lr_at(299_999, &pre), 2e-4);
    assert_eq!(lr_at(300_000, &pre), 1e-4);
    assert_eq!(lr_at(799_999, &pre), 2e-4 / 32.0);
    let toy = TrainConfig::toy();
    assert_eq!((toy.total_iters, toy.milestones.clone(), toy.lr0), (2000, vec![1500], 2e-4));
}

#[test]
fn adam_matches_hand_rolled_update() {
    let mut params = ParamStore::<f64>::new();
    params.insert("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
    let mut state = AdamState::new(&params);
    let grads = [[0.1, -0.2, 0.0], [0.3, 0.1, -0.5], [-0.2, 0.4, 0.05]];
    let (mut w, mut m, mut v) = ([0.5, -1.0, 2.0], [0.0; 3], [0.0; 3]);
    for (t, g) in grads.iter().enumerate() {
        params.get_mut("w").unwrap().grad = Some(Tensor::from_f64(&[3], g).unwrap());
        adam_step(&mut params, &mut state, 1e-2).unwrap();
        let t = t as i32 + 1;
        for i in 0..3 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
            let mhat = m[i] / (1.0 - 0.9f64.powi(t));
            let vhat = v[i] / (1.0 - 0.99f64.powi(t));
            w[i] -= 1e-2 * mhat / (vhat.sqrt() + 1e-8);
        }
    }
    for (a, b) in params.value("w").unwrap().data().iter().zip(w) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(state.t, 3);
}

#[test]
fn loss_decreases_and_runs_are_reproducible() {
    let data = pairs(2, 32);
    let cfg = quick_cfg(4);
    let run = || {
        let mut m = Model32::new(HmaConfig::toy(), 3).unwrap();
        let out = train_loop(&mut m, &data, &cfg, None, |_| {}).unwrap();
        (m, out)
    };
    let (a, oa) = run();
    let (b, ob) = run();
    assert!(same_params(&a, &b));
    assert_eq!(oa.loss_trace, ob.loss_trace);
    assert_eq!(oa.loss_trace.len(), 4);
    assert_eq!(loss_trace_csv(&oa.loss_trace), loss_trace_csv(&ob.loss_trace));
    assert_eq!(
        Checkpoint::from_model(&a, Some(&oa.optimizer), 4).to_bytes(),
        Checkpoint::from_model(&b, Some(&ob.optimizer), 4).to_bytes()
    );
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let data = pairs(2, 32);
    let cfg = quick_cfg(5);
    let mut straight = Model32::new(HmaConfig::toy(), 4).unwrap();
    let mut mid = None;
    train_loop(&mut straight, &data, &cfg, None, |e| {
        if let TrainEvent::Milestone { iter: 2, model, optimizer } = e {
            mid = Some(Checkpoint::from_model(model, Some(optimizer), 2).to_bytes());
        }
    })
    .unwrap();
    let ck = Checkpoint::from_bytes(&mid.expect("milestone at 2")).unwrap();
    let mut resumed: Model32 = ck.model().unwrap();
    let opt = ck.optimizer.clone().unwrap();
    assert_eq!(opt.t, 2);
    train_loop(&mut resumed, &data, &cfg, Some((opt, ck.iteration)), |_| {}).unwrap();
    assert!(same_params(&straight, &resumed));
}

#[test]
fn non_finite_loss_stops_training() {
    let data = pairs(1, 32);
    let mut m = Model32::new(HmaConfig::toy(), 5).unwrap();
    let bad = Tensor::full(&[3], f32::NAN);
    m.params.set("recon.conv_last.bias", bad).unwrap();
    match train_loop(&mut m, &data, &quick_cfg(3), None, |_| {}) {
        Err(Error::NonFiniteLoss { iter: 0, .. }) => {}
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.iterations)),
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model32::new(HmaConfig::toy(), 6).unwrap();
    let ck = Checkpoint::from_model(&model, None, 17);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.iteration, 17);
    assert_eq!(back.config, HmaConfig::toy());
    assert_eq!(back.to_bytes(), ck.to_bytes());
    let m2: Model32 = back.model().unwrap();
    assert!(same_params(&model, &m2));

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    // trailer: iteration u64, optimizer flag; then the last tensor record
    // (bias: 3 floats + CRC, name, rank, one dim, dtype) and the weight's CRC
    let bias_record = 2 + "recon.conv_last.bias".len() + 1 + 4 + 1 + 12 + 4;
    let in_weight_payload = n - 8 - 1 - bias_record - 4 - 1;
    bytes[in_weight_payload] ^= 0x10;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(err.contains("recon.conv_last.weight"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..n - 3]).is_err());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1, "no temporary files left behind");
}

#[test]
fn scale_transfer_keeps_the_body() {
    let src_model = Model32::new(HmaConfig::toy().with_scale(3), 7).unwrap();
    let src = Checkpoint::from_model(&src_model, None, 0);
    let dst_cfg = HmaConfig::toy().with_scale(4);
    let (dst, report) = transfer_parameters(&src, &dst_cfg, 8).unwrap();

    let body: Vec<&str> = dst.params.names().filter(|n| !is_head_param(n)).collect();
    let copied: Vec<&str> = report.copied.iter().map(String::as_str).collect();
    for name in &body {
        assert!(copied.contains(name), "{name} not copied");
        assert_eq!(dst.params.value(name).unwrap().data(), src_model.params.value(name).unwrap().data());
    }
    assert!(report.reinitialized.iter().all(|n| n.starts_with("recon.upsample.")));
    assert_eq!(report.reinitialized.len(), 4);
    assert_eq!(report.total(), dst.params.len());
    let fresh = HmaModel::<f32>::new(dst_cfg, 8).unwrap();
    for name in &report.reinitialized {
        assert_eq!(dst.params.value(name).unwrap().data(), fresh.params.value(name).unwrap().data());
    }
}
