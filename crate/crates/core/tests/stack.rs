mod common;

use common::*;
use deformconv_core::baselines::Dense;
use deformconv_core::deform::{oracle_forward_features, AnchorGrid, DeformableFilter};
use deformconv_core::matrix::Matrix;
use deformconv_core::nn::{
    adam_step, cross_entropy, evaluate, loss_and_grads, stack_forward, train, train_epoch, Layer, LayerStack,
    Neighborhood, OptimizerState, Prepared, StackBuilder, TrainConfig,
};
use deformconv_core::pointcloud::{synth_dataset, Dataset, PointCloud, SynthKind, Task};
use deformconv_core::rng::{normal, permutation};
use deformconv_core::spatial::self_neighbors;

fn hood() -> Neighborhood<f64> {
    Neighborhood { radius: 0.7, cap: 16 }
}

fn grid() -> AnchorGrid<f64> {
    AnchorGrid::cubic(3, 0.2).unwrap()
}

fn every_layer_kind(seg: bool) -> LayerStack<f64> {
    let mut r = rng(300);
    let b = StackBuilder::new(2, hood())
        .deform(4, grid())
        .relu()
        .separable(3, grid())
        .relu()
        .concat(0)
        .pcc(3, &[4, 4])
        .relu();
    let b = if seg { b.linear(2) } else { b.max_pool().linear(3) };
    b.build(&mut r).unwrap()
}

#[test]
fn identity_stack_passes_features_through() {
    let id = Dense::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
    let stack = LayerStack::new(3, vec![Layer::Linear(id)], hood()).unwrap();
    let mut r = rng(301);
    let cloud = random_cloud(&mut r, 20, 3, 0.5);
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    assert_eq!(&stack_forward(&stack, &cloud, &nb).unwrap(), cloud.features());
}

#[test]
fn max_pool_of_constant_features() {
    let w = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
    let lin = Dense::new(w, vec![0.5, 0.0]).unwrap();
    let stack = LayerStack::new(1, vec![Layer::Linear(lin), Layer::GlobalMaxPool], hood()).unwrap();
    assert_eq!(stack.task(), Task::Classification);
    let mut r = rng(302);
    let positions = random_positions(&mut r, 10, 0.5);
    let cloud = PointCloud::new(positions, Matrix::from_vec(10, 1, vec![3.0; 10]).unwrap(), None).unwrap();
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let out = stack_forward(&stack, &cloud, &nb).unwrap();
    assert_eq!(out.rows(), 1);
    assert_eq!(out.row(0), &[6.5, -3.0]);
}

#[test]
fn two_layer_stack_matches_layerwise_oracle() {
    let cloud = PointCloud::new(
        vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]],
        Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
        None,
    )
    .unwrap();
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let mut r = rng(303);
    let f1 = DeformableFilter::random(grid(), 1, 3, true, 1.0, &mut r).unwrap();
    let f2 = DeformableFilter::random(grid(), 3, 2, true, 1.0, &mut r).unwrap();
    let stack = LayerStack::new(1, vec![Layer::Deform(f1.clone()), Layer::Deform(f2.clone())], hood()).unwrap();
    let got = stack_forward(&stack, &cloud, &nb).unwrap();
    let mid = oracle_forward_features(cloud.features(), &nb, &f1).unwrap();
    let want = oracle_forward_features(&mid, &nb, &f2).unwrap();
    assert!(got.rel_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn construction_errors() {
    let mut r = rng(304);
    assert!(StackBuilder::<f64>::new(2, hood()).linear(3).deform(2, grid()).build(&mut r).is_ok());
    // support 0.69 > radius 0.5
    let small = Neighborhood { radius: 0.5, cap: 16 };
    assert!(StackBuilder::<f64>::new(2, small).deform(2, grid()).build(&mut r).is_err());
    assert!(StackBuilder::<f64>::new(2, hood()).max_pool().max_pool().build(&mut r).is_err());
    assert!(StackBuilder::<f64>::new(2, hood()).max_pool().deform(2, grid()).build(&mut r).is_err());
    assert!(StackBuilder::<f64>::new(2, hood()).concat(3).build(&mut r).is_err());
    let lin = Dense::new(Matrix::zeros(3, 2), vec![0.0; 2]).unwrap();
    assert!(LayerStack::new(2, vec![Layer::Linear(lin)], hood()).is_err());
}

#[test]
fn stack_gradients_match_finite_differences() {
    for seg in [true, false] {
        let mut stack = every_layer_kind(seg);
        let mut r = rng(305);
        // zero-initialized biases put the MLP's self-offset pre-activations
        // exactly on the rectifier kink; move them off it
        for block in stack.params_mut() {
            block.iter_mut().for_each(|v| *v += normal::<f64>(&mut r, 0.1));
        }
        let cloud = random_cloud(&mut r, 12, 2, 0.3);
        let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
        let trace = stack.forward_trace(cloud.features(), &nb).unwrap();
        let grads = stack.backward(&trace, &nb, &trace.output().scale(2.0)).unwrap();
        assert_eq!(grads.len(), stack.param_shapes().len());
        for (p, g) in grads.iter().enumerate() {
            let mut values = stack.params()[p].to_vec();
            let fd = finite_diff(&mut values, 1e-5, |v| {
                stack.params_mut()[p].copy_from_slice(v);
                sum_sq(&stack_forward(&stack, &cloud, &nb).unwrap())
            });
            stack.params_mut()[p].copy_from_slice(&values);
            let err = rel_err(g, &fd);
            assert!(err <= 1e-6, "seg={seg} param block {p}: {err}");
        }
    }
}

#[test]
fn one_step_decreases_loss() {
    let data = synth_dataset::<f64>(SynthKind::TwoSurfacesSeg, 4, 64, 0.0, 306).unwrap();
    let mut r = rng(307);
    let mut stack = StackBuilder::new(2, hood()).deform(8, grid()).relu().linear(2).build(&mut r).unwrap();
    let prepared = Prepared::new(&data, hood()).unwrap();
    let batch_loss = |s: &LayerStack<f64>| -> f64 {
        (0..4)
            .map(|i| loss_and_grads(s, &data.clouds[i], &prepared.tables[i]).unwrap().0)
            .sum::<f64>()
    };
    let before = batch_loss(&stack);
    let mut opt = OptimizerState::new(&stack.param_shapes(), 1e-5, 0.0);
    let mut grads: Vec<Vec<f64>> = stack.param_shapes().iter().map(|&n| vec![0.0; n]).collect();
    for i in 0..4 {
        let (_, g) = loss_and_grads(&stack, &data.clouds[i], &prepared.tables[i]).unwrap();
        for (a, b) in grads.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y / 4.0);
        }
    }
    adam_step(&mut opt, &mut stack.params_mut(), &grads).unwrap();
    assert!(batch_loss(&stack) < before);
}

#[test]
fn segmentation_stack_is_permutation_equivariant() {
    let stack = every_layer_kind(true);
    let mut r = rng(308);
    let cloud = random_cloud(&mut r, 40, 2, 0.5);
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let base = stack_forward(&stack, &cloud, &nb).unwrap();
    let order = permutation(&mut r, 40);
    let shuffled = cloud.permuted(&order).unwrap();
    let nb2 = self_neighbors(shuffled.positions(), 0.7, 16).unwrap();
    let out = stack_forward(&stack, &shuffled, &nb2).unwrap();
    for (i, &src) in order.iter().enumerate() {
        assert!(rel_err(out.row(i), base.row(src)) <= 1e-9);
    }
}

#[test]
fn classification_stack_is_permutation_invariant() {
    let stack = every_layer_kind(false);
    let mut r = rng(309);
    let cloud = random_cloud(&mut r, 40, 2, 0.5);
    let nb = self_neighbors(cloud.positions(), 0.7, 16).unwrap();
    let base = stack_forward(&stack, &cloud, &nb).unwrap();
    let shuffled = cloud.permuted(&permutation(&mut r, 40)).unwrap();
    let nb2 = self_neighbors(shuffled.positions(), 0.7, 16).unwrap();
    let out = stack_forward(&stack, &shuffled, &nb2).unwrap();
    assert!(out.rel_diff(&base).unwrap() <= 1e-9);
}

#[test]
fn evaluate_ignores_point_order() {
    let data = synth_dataset::<f64>(SynthKind::TwoSurfacesSeg, 6, 80, 0.01, 310).unwrap();
    let mut r = rng(311);
    let stack = StackBuilder::new(2, hood()).deform(4, grid()).relu().linear(2).build(&mut r).unwrap();
    let shuffled: Vec<PointCloud<f64>> = data
        .clouds
        .iter()
        .map(|c| c.permuted(&permutation(&mut r, c.len())).unwrap())
        .collect();
    let shuffled = Dataset::new(shuffled, 2, Task::Segmentation).unwrap();
    assert_eq!(evaluate(&stack, &data).unwrap(), evaluate(&stack, &shuffled).unwrap());
}

#[test]
fn evaluate_rejects_mismatched_task_and_empty_data() {
    let data = synth_dataset::<f64>(SynthKind::Shapes4, 4, 32, 0.0, 312).unwrap();
    let mut r = rng(313);
    let seg = StackBuilder::new(2, hood()).deform(4, grid()).linear(4).build(&mut r).unwrap();
    assert!(evaluate(&seg, &data).is_err());
    let cls = StackBuilder::new(2, hood()).deform(4, grid()).max_pool().linear(4).build(&mut r).unwrap();
    let m = evaluate(&cls, &data).unwrap();
    assert!((0.0..=1.0).contains(&m.accuracy) && (0.0..=1.0).contains(&m.miou));
    let empty = Dataset::<f64>::new(Vec::new(), 4, Task::Classification);
    if let Ok(empty) = empty {
        assert!(evaluate(&cls, &empty).is_err());
    }
}

#[test]
fn short_training_run_is_deterministic_and_learns() {
    let data = synth_dataset::<f64>(SynthKind::TwoSurfacesSeg, 24, 96, 0.005, 314).unwrap();
    let (tr, te) = data.split_at(16);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        lr: 1e-2,
        weight_decay: 0.0,
    };
    let run = || {
        let mut r = rng(315);
        let mut stack = StackBuilder::new(2, hood()).deform(8, grid()).relu().linear(2).build(&mut r).unwrap();
        let ptr = Prepared::new(&tr, hood()).unwrap();
        let pte = Prepared::new(&te, hood()).unwrap();
        let mut seen = 0;
        let (_, logs) = train(&mut stack, &ptr, &pte, &cfg, &mut r, |_| seen += 1).unwrap();
        assert_eq!(seen, 4);
        (stack, logs)
    };
    let (s1, l1) = run();
    let (s2, l2) = run();
    assert_eq!(s1, s2);
    assert_eq!(l1, l2);
    assert!(l1.last().unwrap().loss < l1[0].loss);
}

#[test]
fn train_epoch_rejects_zero_batch() {
    let data = synth_dataset::<f64>(SynthKind::TwoSurfacesSeg, 2, 32, 0.0, 316).unwrap();
    let mut r = rng(317);
    let mut stack = StackBuilder::new(2, hood()).linear(2).build(&mut r).unwrap();
    let mut opt = OptimizerState::new(&stack.param_shapes(), 1e-3, 0.0);
    let p = Prepared::new(&data, hood()).unwrap();
    assert!(train_epoch(&mut stack, &mut opt, &p, 0, &mut r).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(318);
    let logits = random_matrix(&mut r, 5, 3);
    let labels = [0, 2, 1, 1, 0];
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let mut v = logits.as_slice().to_vec();
    let fd = finite_diff(&mut v, 1e-5, |p| cross_entropy(&Matrix::from_vec(5, 3, p.to_vec()).unwrap(), &labels).unwrap().0);
    assert!(rel_err(g.as_slice(), &fd) <= 1e-6);
}
