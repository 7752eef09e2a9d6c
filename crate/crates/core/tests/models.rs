use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stsmcd::data::{synth, SynthConfig};
use stsmcd::models::{semantic_change_mask, transition_matrix, Outputs, Prediction};
use stsmcd::{Graph, LabelMap, Model, ModelConfig, Task, Tensor, Variant, IGNORE};

fn pair(size: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut rng),
        Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut rng),
    )
}

#[test]
fn stage_shapes_follow_the_pyramid() {
    let cfg = ModelConfig::micro();
    assert_eq!(cfg.stage_shapes(64, 32).unwrap(), [(16, 8, 8), (8, 4, 16), (4, 2, 32), (2, 1, 64)]);
    assert!(cfg.stage_shapes(48, 64).is_err());
    let tiny = ModelConfig::new(Variant::Tiny);
    assert_eq!(tiny.depths, [2, 2, 4, 2]);
    assert_eq!(tiny.channels, [96, 192, 384, 768]);
}

#[test]
fn micro_parameter_budget() {
    let n = Model::new(Task::Bcd, ModelConfig::micro(), 0).store.num_scalars();
    assert!((900_000..1_300_000).contains(&n), "{n}");
}

#[test]
fn outputs_are_per_pixel_distributions() {
    let (x1, x2) = pair(32, 1);
    for task in [Task::Bcd, Task::Scd, Task::Bda] {
        let model = Model::new(task, ModelConfig::micro(), 7);
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let vars = match model.forward(&mut g, &p, a, b).unwrap() {
            Outputs::Bcd { change } => vec![(change, 2)],
            Outputs::Scd { t1, t2, change } => vec![(t1, 7), (t2, 7), (change, 2)],
            Outputs::Bda { loc, clf } => vec![(loc, 2), (clf, 5)],
        };
        for (v, k) in vars {
            assert_eq!(g.shape(v), &[32, 32, k], "{task}");
            for row in g.value(v).data().chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn same_seed_same_model_same_prediction() {
    let (x1, x2) = pair(32, 2);
    let a = Model::new(Task::Scd, ModelConfig::micro(), 3);
    let b = Model::new(Task::Scd, ModelConfig::micro(), 3);
    assert_eq!(a.store.tensors(), b.store.tensors());
    let pa = a.predict(&x1, &x2).unwrap();
    assert_eq!(pa, b.predict(&x1, &x2).unwrap());
    assert!(matches!(pa, Prediction::Scd { .. }));
    assert_eq!(pa.maps().len(), 3);
}

#[test]
fn loss_is_finite_and_backpropagates() {
    let sample = synth::generate(&SynthConfig::new(Task::Bda, 1, 32, 5)).unwrap().remove(0);
    let model = Model::new(Task::Bda, ModelConfig::micro(), 0);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let a = g.constant(sample.t1.clone());
    let b = g.constant(sample.t2.clone());
    let out = model.forward(&mut g, &p, a, b).unwrap();
    let loss = model.loss(&mut g, &out, &sample.labels).unwrap();
    assert!(g.value(loss).data()[0].is_finite());
    g.backward(loss, &Tensor::scalar(1.0)).unwrap();
    let grads = p.grads(&g);
    assert_eq!(grads.len(), model.store.len());
    assert!(grads.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn wrong_label_task_is_rejected() {
    let sample = synth::generate(&SynthConfig::new(Task::Bcd, 1, 32, 5)).unwrap().remove(0);
    let model = Model::new(Task::Bda, ModelConfig::micro(), 0);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let a = g.constant(sample.t1.clone());
    let b = g.constant(sample.t2.clone());
    let out = model.forward(&mut g, &p, a, b).unwrap();
    assert!(model.loss(&mut g, &out, &sample.labels).is_err());
}

#[test]
fn semantic_mask_and_transitions() {
    let t1 = LabelMap::new(1, 4, vec![1, 2, 3, 1]).unwrap();
    let t2 = LabelMap::new(1, 4, vec![2, 2, 1, 3]).unwrap();
    let change = LabelMap::new(1, 4, vec![1, 0, 1, 1]).unwrap();
    let (m1, m2) = semantic_change_mask(&t1, &t2, &change).unwrap();
    assert_eq!(m1.data, vec![1, IGNORE, 3, 1]);
    assert_eq!(m2.data, vec![2, IGNORE, 1, 3]);
    let tm = transition_matrix(&m1, &m2, 4).unwrap();
    assert_eq!(tm[1][2], 1);
    assert_eq!(tm[3][1], 1);
    assert_eq!(tm[1][3], 1);
    assert_eq!(tm.iter().flatten().sum::<u64>(), 3);
}
