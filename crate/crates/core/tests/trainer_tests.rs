use scch_core::metrics::evaluate;
use scch_core::network::{ModelConfig, Network};
use scch_core::scc::SccConfig;
use scch_core::synth::{Dataset, GenerateOptions, Roster};
use scch_core::trainer::{
    adam_step, batch_tensors, loss_curve_csv, run_ablation, train, train_step, AblationGrid, TrainConfig,
};
use scch_core::{Error, Parameter, Tensor};

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 32,
        encoder_channels: vec![8, 16, 16],
        deconv_channels: 12,
        num_maps: 8,
        scc: SccConfig {
            k: 3,
            ..Default::default()
        },
        init_seed: seed,
        ..Default::default()
    }
}

fn tiny_data(n_train: usize, n_test: usize) -> Dataset {
    Dataset::generate(
        Roster::default(),
        GenerateOptions {
            n_train,
            n_test,
            image_size: 32,
            seed: 3,
        },
    )
    .unwrap()
}

#[test]
fn overfits_eight_samples() {
    // every AU is usually active, so all eight maps carry signal
    let roster = Roster {
        marginals: [0.05, 0.15, 0.2, 0.2, 0.2, 0.2],
        ..Roster::default()
    };
    let opts = GenerateOptions {
        n_train: 8,
        n_test: 0,
        image_size: 32,
        seed: 3,
    };
    let data = Dataset::generate(roster, opts).unwrap();
    let model = ModelConfig {
        input_size: 32,
        init_seed: 1,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 8,
        learning_rate: 2e-3,
        eval_every: 0,
        ..Default::default()
    };
    let out = train(Network::new(model).unwrap(), &data.train, &[], &tc, &mut |_| {}).unwrap();
    let first = out.curve[0].train_loss;
    let last = out.curve.last().unwrap().train_loss;
    assert!(last < 0.01 * first, "loss {first} -> {last}");
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = tiny_data(6, 0);
    let net = Network::new(tiny_model(2)).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 0.0,
        eval_every: 0,
        ..Default::default()
    };
    let out = train(net.clone(), &data.train, &[], &tc, &mut |_| {}).unwrap();
    for (a, b) in net.params().iter().zip(out.network.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn adam_single_step_on_quadratic() {
    // f(x) = (x − 3)², x0 = 1, gradient −4
    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..Default::default()
    };
    let mut p = Parameter::new("x", Tensor::from_vec(vec![1.0]));
    p.accumulate_grad(&[2.0 * (1.0 - 3.0)]);
    adam_step(&mut p, &cfg);
    let g = -4.0f64;
    let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
    let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
    let expect = 1.0 - 0.05 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((p.value.data()[0] as f64 - expect).abs() < 1e-6);

    // second step with the same gradient keeps the size of the move
    let before = p.value.data()[0];
    p.zero_grad();
    p.accumulate_grad(&[-4.0]);
    adam_step(&mut p, &cfg);
    assert!(((p.value.data()[0] - before) as f64 - 0.05).abs() < 1e-6);
}

#[test]
fn adam_leaves_zero_gradient_entries() {
    let cfg = TrainConfig::default();
    let mut p = Parameter::new("w", Tensor::from_vec(vec![0.5, -0.25, 2.0, 1.0]));
    p.accumulate_grad(&[0.0, 1.0, 0.0, -3.0]);
    adam_step(&mut p, &cfg);
    assert_eq!(p.value.data()[0], 0.5);
    assert_eq!(p.value.data()[2], 2.0);
    assert_ne!(p.value.data()[1], -0.25);
    assert_ne!(p.value.data()[3], 1.0);
}

#[test]
fn first_step_rarely_increases_batch_loss() {
    let data = tiny_data(40, 0);
    let cfg = TrainConfig::default();
    let trials = 20;
    let mut ok = 0;
    for t in 0..trials {
        let mut net = Network::new(tiny_model(100 + t)).unwrap();
        let batch: Vec<_> = data.train[(t as usize * 2)..(t as usize * 2 + 2)].iter().collect();
        let (x, y) = batch_tensors(&batch, net.config()).unwrap();
        let before = train_step(&mut net, x.clone(), y.clone(), &cfg).unwrap();
        let mut probe = net.clone();
        let after = train_step(&mut probe, x, y, &TrainConfig { learning_rate: 0.0, ..cfg.clone() }).unwrap();
        ok += (after <= before) as usize;
    }
    assert!(ok as f64 >= 0.95 * trials as f64, "{ok}/{trials}");
}

#[test]
fn training_is_reproducible() {
    let data = tiny_data(12, 6);
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let out = train(Network::new(tiny_model(9)).unwrap(), &data.train, &data.test, &tc, &mut |_| {}).unwrap();
        loss_curve_csv(&out.curve)
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts_with_batch_index() {
    let mut data = tiny_data(8, 0);
    data.train[5].image.data_mut()[0] = f32::NAN;
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        eval_every: 0,
        ..Default::default()
    };
    let err = train(Network::new(tiny_model(1)).unwrap(), &data.train, &[], &tc, &mut |_| {})
        .err()
        .unwrap();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn single_cell_grid_is_train_plus_evaluate() {
    let data = tiny_data(8, 8);
    let text = "input_size=32\nencoder_channels=8,16,16\ndeconv_channels=12\nscc_k=3\nepochs=2\nbatch_size=4\nkeep_best=off\nseeds=4\n";
    let grid = AblationGrid::parse(text, "grid").unwrap();
    let results = run_ablation(&data, &grid, 1, &|_| {});
    assert_eq!(results.len(), 1);
    let got = results[0].outcome.as_ref().unwrap();

    let rc = grid.cell_config(&grid.cells()[0]);
    let out = train(Network::new(rc.model).unwrap(), &data.train, &data.test, &rc.train, &mut |_| {}).unwrap();
    let report = evaluate(&out.network, &data.test).unwrap();
    assert_eq!(got.avg_icc, report.avg_icc);
    assert_eq!(got.avg_mae, report.avg_mae);
}

#[test]
fn grid_rows_and_failed_cells() {
    let data = tiny_data(4, 4);
    // k=20 is invalid for 12 channels and must fail without stopping the grid
    let text = "input_size=32\nencoder_channels=8,16,16\ndeconv_channels=12\nepochs=1\nscc=on,off\nk=3,20\n";
    let grid = AblationGrid::parse(text, "grid").unwrap();
    let results = run_ablation(&data, &grid, 2, &|_| {});
    assert_eq!(results.len(), grid.cells().len());
    assert_eq!(results.len(), 4);
    let failed: Vec<_> = results.iter().filter(|r| r.outcome.is_err()).map(|r| (r.cell.scc, r.cell.k)).collect();
    assert_eq!(failed, vec![(true, 20)]);
}
