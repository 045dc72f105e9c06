use cps::tensor::{self, conv2d, deconv2d, gradcheck, ConvGeometry, Graph, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.input(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = g.input(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.data(c), &[11.0]);
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
    assert_eq!(g.grad(b).unwrap(), &[1.0, 2.0]);
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let a = t(&[1, 2], &[1.0, 2.0]);
    let b = t(&[2, 1], &[3.0, 4.0]);
    let r = gradcheck::check(&[a, b], 1e-6, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-8, "{r:?}");
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(x);
    assert_eq!(g.data(y), &[0.5, 0.5]);
    let x = g.constant(vec![2], vec![1000.0, 0.0]).unwrap();
    let y = g.softmax(x);
    assert!(g.data(y).iter().all(|v| v.is_finite()));
    assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.data(y)[1] < 1e-300 || g.data(y)[1] == 0.0);

    let x = t(&[3], &[0.3, -1.2, 2.0]);
    let w = t(&[3], &[0.7, -0.4, 1.3]);
    let r = gradcheck::check(&[x, w], 1e-5, |g, v| {
        let y = g.softmax(v[0]);
        let p = g.mul(y, v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(vec![3], vec![1.0; 3]).unwrap();
    let beta = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let x = g.constant(vec![3], vec![2.5; 3]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);

    let gamma = g.constant(vec![2], vec![1.0; 2]).unwrap();
    let beta = g.constant(vec![2], vec![0.0; 2]).unwrap();
    let x = g.constant(vec![2], vec![1.0, 3.0]).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.data(y)[0] + 1.0).abs() < 1e-9 && (g.data(y)[1] - 1.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[5]), rand_t(&mut rng, &[5]), rand_t(&mut rng, &[4, 5])];
    let r = gradcheck::check(&inputs, 1e-5, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let p = g.mul(y, v[3])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-5, "{r:?}");
}

#[test]
fn conv_examples() {
    // 1×1 unit kernel, two input channels summed into one output channel
    let mut g = Graph::new();
    let x = g.constant(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let k = g.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let y = conv2d(&mut g, x, k, None, ConvGeometry::new(1, 1, 0)).unwrap();
    assert_eq!(g.shape(y), &[2, 2, 1]);
    assert_eq!(g.data(y), &[3.0, 7.0, 11.0, 15.0]);

    let x = g.constant(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let k = g.constant(vec![4, 1], vec![0.25; 4]).unwrap();
    let y = conv2d(&mut g, x, k, None, ConvGeometry::new(2, 2, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.data(y), &[2.5]);

    let x = g.constant(vec![4, 6, 3], vec![0.5; 72]).unwrap();
    let k = g.constant(vec![4 * 3, 2], vec![0.1; 24]).unwrap();
    let y = deconv2d(&mut g, x, k, None, ConvGeometry::new(2, 2, 0)).unwrap();
    assert_eq!(g.shape(y), &[8, 12, 2]);

    let x = g.constant(vec![2, 2, 1], vec![0.0; 4]).unwrap();
    let k = g.constant(vec![9, 1], vec![0.0; 9]).unwrap();
    assert!(conv2d(&mut g, x, k, None, ConvGeometry::new(3, 1, 0)).is_err());
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [rand_t(&mut rng, &[5, 4, 2]), rand_t(&mut rng, &[18, 3]), rand_t(&mut rng, &[3])];
    let r = gradcheck::check(&inputs, 1e-5, |g, v| {
        let y = conv2d(g, v[0], v[1], Some(v[2]), ConvGeometry::new(3, 2, 1))?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-6, "{r:?}");

    let inputs = [rand_t(&mut rng, &[3, 2, 2]), rand_t(&mut rng, &[8, 3]), rand_t(&mut rng, &[3])];
    let r = gradcheck::check(&inputs, 1e-5, |g, v| {
        let y = deconv2d(g, v[0], v[1], Some(v[2]), ConvGeometry::new(2, 2, 0))?;
        let y = g.gelu(y);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-6, "{r:?}");
}

#[test]
fn deconv_scatters_each_input_into_its_output_block() {
    // Stride-2, k=2 deconv writes each input cell into a disjoint 2×2 block.
    let mut g = Graph::new();
    let x = g.constant(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let k = g.constant(vec![4, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
    let y = deconv2d(&mut g, x, k, None, ConvGeometry::new(2, 2, 0)).unwrap();
    let d = g.data(y);
    // Top-left block comes from input 1.0.
    let block: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(r, c)| d[r * 4 + c]).collect();
    let mut sorted = block.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(sorted, vec![1.0, 10.0, 100.0, 1000.0]);
    assert_eq!(d.iter().sum::<f64>(), 1111.0 * 10.0);
}

#[test]
fn cosine_op_examples_and_degenerate() {
    let mut g = Graph::new();
    let a = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let b = g.constant(vec![2], vec![1.0, 0.0]).unwrap();
    let c = g.cosine(a, b).unwrap();
    assert!((g.item(c) - 0.707_106_781_186_547_5).abs() < 1e-9);
    let z = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    assert!(matches!(g.cosine(z, b), Err(TensorError::Degenerate { .. })));
    assert_eq!(tensor::cosine(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
}

#[test]
fn smooth_l1_and_bce_values() {
    let mut g = Graph::new();
    let p = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let l = g.smooth_l1(p, vec![1.0; 4]).unwrap();
    assert_eq!(g.item(l), 2.0);
    let z = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let b = g.bce_with_logits(z, vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    assert!((g.item(b) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let z = g.constant(vec![2], vec![60.0, -60.0]).unwrap();
    let b = g.bce_with_logits(z, vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    assert!(g.item(b) < 1e-20);
}

#[test]
fn backward_visits_nodes_in_reverse_order_and_populates_leaves() {
    let mut g = Graph::new();
    let w = Tensor::vector(vec![0.5, -1.0, 2.0]).param();
    let frozen = Tensor::vector(vec![1.0, 1.0, 1.0]);
    let wv = g.param(&w);
    let fv = g.param(&frozen);
    let m = g.mul(wv, fv).unwrap();
    let s = g.gelu(m);
    let l = g.sum(s);
    g.backward(l).unwrap();
    let trace = g.backward_trace();
    assert!(trace.windows(2).all(|p| p[0] > p[1]));
    assert!(g.grad_for(&w).is_some());
    assert!(g.grad_for(&frozen).is_none());
}

#[test]
fn same_tensor_maps_to_one_leaf_and_gradients_sum() {
    let mut g = Graph::new();
    let p = Tensor::vector(vec![1.0, 2.0]).param();
    let a = g.param(&p);
    let b = g.param(&p);
    assert_eq!(a, b);
    let s1 = g.sum(a);
    let s2 = g.sum(b);
    let both = g.add(s1, s2).unwrap();
    g.backward(both).unwrap();
    assert_eq!(g.grad_for(&p).unwrap(), &[2.0, 2.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let a = g.constant(vec![6, 7], (0..42).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let b = g.constant(vec![7, 3], (0..21).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c);
        g.data(s).to_vec()
    };
    assert_eq!(run(), run());
}
