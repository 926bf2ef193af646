use anomkit::dcae::{build_model, train_dcae, train_fusion, Architecture, FusionHyper, TrainHyper};
use anomkit::numcore::{Network, Rng};
use anomkit::patches::{build_dataset, DatasetInput, PatchDataset, PatchPair, Preset};
use anomkit::phantom::{generate_volume, PhantomConfig, Split};
use anomkit::preprocess::{preprocess_volume, PreprocessConfig};

fn healthy_dataset(volumes: u64, cap: usize) -> PatchDataset {
    let pre: Vec<_> = (0..volumes)
        .map(|i| {
            let (v, _) = generate_volume(&PhantomConfig::desk().healthy().with_seed(100 + i)).unwrap();
            preprocess_volume(&v, &PreprocessConfig::default()).unwrap()
        })
        .collect();
    let inputs: Vec<_> = pre
        .iter()
        .enumerate()
        .map(|(i, p)| DatasetInput {
            volume: i,
            patient: i,
            data: p,
        })
        .collect();
    build_dataset(&inputs, Split::Healthy, Preset::Desk, Some(cap), &mut Rng::new(1)).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn paper_encoder_shape_trace() {
    let arch = Architecture::for_preset(Preset::Paper);
    let specs = arch.scale_specs(0.2);
    let enc = Network::<f32>::build(&[32, 32, 1], &specs[..Architecture::ENCODER_LAYERS], &mut Rng::new(3)).unwrap();
    assert_eq!(enc.output_shape_at(0), &[24, 24, 512]);
    assert_eq!(enc.output_shape_at(3), &[8, 8, 512]);
    assert_eq!(enc.output_shape_at(4), &[2048]);
    assert_eq!(enc.output_shape(), &[512]);
}

#[test]
fn paper_fusion_hidden_size() {
    let arch = Architecture::for_preset(Preset::Paper);
    let fusion = Network::<f32>::build(&[2 * arch.code], &arch.fusion_specs(true), &mut Rng::new(3)).unwrap();
    assert_eq!(fusion.output_shape_at(1), &[256]);
    assert_eq!(fusion.output_shape(), &[1024]);
}

#[test]
fn loss_halves_within_200_steps() {
    let ds = healthy_dataset(4, 4000);
    let mut m = build_model(Preset::Desk, 0.2, true, &mut Rng::new(2)).unwrap();
    let hyper = TrainHyper {
        max_steps: Some(200),
        epochs: 100,
        ..Default::default()
    };
    train_dcae(&mut m, &ds, &hyper, &mut Rng::new(3)).unwrap();
    let s = &m.scale_log.steps;
    assert_eq!(s.len(), 200);
    let (first, last) = (mean(&s[..10]), mean(&s[190..]));
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

#[test]
fn identical_patches_are_memorized() {
    let ds = healthy_dataset(1, 1);
    let pair = ds.pairs[0].clone();
    let ds = PatchDataset {
        split: Split::Healthy,
        preset: Preset::Desk,
        pairs: vec![pair; 64],
    };
    let mut m = build_model(Preset::Desk, 0.0, true, &mut Rng::new(4)).unwrap();
    let hyper = TrainHyper {
        max_steps: Some(500),
        epochs: 1000,
        batch_size: 1,
        ..Default::default()
    };
    train_dcae(&mut m, &ds, &hyper, &mut Rng::new(5)).unwrap();
    let last = *m.scale_log.steps.last().unwrap();
    assert!(last < 1e-3, "final loss {last}");
}

fn short_run(threads: usize) -> (Vec<f64>, Vec<f64>, Vec<f32>) {
    let ds = healthy_dataset(1, 300);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut m = build_model(Preset::Desk, 0.2, true, &mut Rng::new(6)).unwrap();
        let hyper = TrainHyper {
            max_steps: Some(12),
            epochs: 10,
            batch_size: 25,
            ..Default::default()
        };
        train_dcae(&mut m, &ds, &hyper, &mut Rng::new(7)).unwrap();
        let fusion = FusionHyper {
            epochs: 2,
            ..Default::default()
        };
        train_fusion(&mut m, &ds, &fusion, &mut Rng::new(8)).unwrap();
        let z = m.extract_features(&ds.pairs[0]).unwrap();
        (m.scale_log.steps.clone(), m.fusion_log.steps.clone(), z)
    })
}

#[test]
fn training_is_independent_of_thread_count() {
    let a = short_run(1);
    let b = short_run(3);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn zero_corruption_fusion_learns() {
    let ds = healthy_dataset(1, 400);
    let mut m = build_model(Preset::Desk, 0.2, true, &mut Rng::new(9)).unwrap();
    let hyper = TrainHyper {
        max_steps: Some(30),
        ..Default::default()
    };
    train_dcae(&mut m, &ds, &hyper, &mut Rng::new(10)).unwrap();
    let fusion = FusionHyper {
        epochs: 15,
        corruption: 0.0,
        ..Default::default()
    };
    train_fusion(&mut m, &ds, &fusion, &mut Rng::new(11)).unwrap();
    let e = &m.fusion_log.epochs;
    assert!(e.last().unwrap() < &e[0], "{e:?}");
}

#[test]
fn features_are_pure_and_finite() {
    let ds = healthy_dataset(1, 200);
    let mut m = build_model(Preset::Desk, 0.2, true, &mut Rng::new(12)).unwrap();
    let hyper = TrainHyper {
        max_steps: Some(5),
        ..Default::default()
    };
    train_dcae(&mut m, &ds, &hyper, &mut Rng::new(13)).unwrap();
    train_fusion(&mut m, &ds, &FusionHyper { epochs: 1, ..Default::default() }, &mut Rng::new(14)).unwrap();
    let (v, _) = generate_volume(&PhantomConfig::desk().with_seed(77)).unwrap();
    let pre = preprocess_volume(&v, &PreprocessConfig::default()).unwrap();
    for sp in pre.retina_superpixels() {
        let pair: PatchPair = anomkit::patches::extract_pair(&pre.volume, sp.slice, sp.center(), Preset::Desk);
        let z = m.extract_features(&pair).unwrap();
        assert_eq!(z.len(), 32);
        assert!(z.iter().all(|v| v.is_finite()));
        assert_eq!(z, m.extract_features(&pair).unwrap());
    }
}
