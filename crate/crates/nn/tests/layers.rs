use hmap_core::rng::SplitMix64;
use hmap_nn::gradcheck::{check_param, grad_check, relative_error, DEFAULT_STEP};
use hmap_nn::*;
use proptest::prelude::*;

const LAYER_TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Direct sliding-window cross-correlation.
fn conv_reference(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    let o = conv.out_channels;
    let wt = conv.weight.value.data();
    let mut y = Tensor::zeros(&[b, o, ho, wo]);
    for n in 0..b {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.value.data()[oc];
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[oc * c * k * k + (ic * k + ki) * k + kj]
                                    * x.data()[((n * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    y.data_mut()[((n * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_sliding_window(
        seed in any::<u64>(), c in 1usize..3, o in 1usize..4,
        h in 1usize..9, w in 1usize..9, stride in 1usize..3,
    ) {
        let mut rng = SplitMix64::new(seed);
        let mut conv = Conv2d::<f64>::new("c", c, o, 3, stride, 1, &mut rng);
        conv.bias.value = random(&[o], seed ^ 1);
        let x = random(&[2, c, h, w], seed ^ 2);
        let (y, _) = conv.forward(&x).unwrap();
        let r = conv_reference(&x, &conv);
        prop_assert_eq!(y.shape(), r.shape());
        for (a, b) in y.data().iter().zip(r.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_state_is_a_convex_combination(seed in any::<u64>(), scale in 0.1f64..4.0) {
        let mut rng = SplitMix64::new(seed);
        let cell = GruCell::<f64>::new("g", 5, 7, &mut rng);
        let x = random(&[3, 5], seed ^ 3);
        let mut h = random(&[3, 7], seed ^ 4);
        h.scale(scale);
        let (h2, cache) = cell.forward(&x, &h).unwrap();
        let (_, _, n) = cache.gates();
        for i in 0..h2.len() {
            let bound = h.data()[i].abs().max(n[i].abs());
            prop_assert!(h2.data()[i].abs() <= bound + 1e-15);
        }
    }
}

#[test]
fn conv_output_sizes() {
    assert_eq!(conv_out(120, 3, 2, 1), Some(60));
    let mut trace = vec![(120, 160)];
    for _ in 0..4 {
        let (h, w) = *trace.last().unwrap();
        trace.push((conv_out(h, 3, 2, 1).unwrap(), conv_out(w, 3, 2, 1).unwrap()));
    }
    assert_eq!(trace, vec![(120, 160), (60, 80), (30, 40), (15, 20), (8, 10)]);
    let mut trace = vec![(40, 276)];
    for _ in 0..4 {
        let (h, w) = *trace.last().unwrap();
        trace.push((conv_out(h, 3, 2, 1).unwrap(), conv_out(w, 3, 2, 1).unwrap()));
    }
    assert_eq!(trace, vec![(40, 276), (20, 138), (10, 69), (5, 35), (3, 18)]);
}

#[test]
fn conv_identity_kernel() {
    let mut rng = SplitMix64::new(1);
    let mut conv = Conv2d::<f64>::new("c", 1, 1, 3, 1, 1, &mut rng);
    conv.weight.value.fill(0.0);
    conv.weight.value.data_mut()[4] = 1.0;
    let x = random(&[1, 1, 5, 6], 2);
    assert_eq!(conv.forward(&x).unwrap().0, x);
}

#[test]
fn conv_shape_errors() {
    let mut rng = SplitMix64::new(1);
    let conv = Conv2d::<f32>::new("c", 2, 1, 3, 2, 1, &mut rng);
    assert!(conv.forward(&Tensor::zeros(&[1, 3, 8, 8])).is_err());
    assert!(conv.forward(&Tensor::zeros(&[3, 8, 8])).is_err());
    let t = ConvTranspose2d::<f32>::new("t", 2, 1, 3, 2, 1, (15, 20), 3.0, &mut rng);
    assert!(t.forward(&Tensor::zeros(&[1, 2, 9, 10])).is_err());
    assert_eq!(t.forward(&Tensor::zeros(&[1, 2, 8, 10])).unwrap().0.shape(), &[1, 1, 15, 20]);
}

#[test]
fn conv_backward_examples() {
    let mut rng = SplitMix64::new(5);
    let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
    let x = random(&[1, 2, 7, 6], 9);
    let (y, cache) = conv.forward(&x).unwrap();
    let dx = conv.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
    assert!(dx.data().iter().all(|v| *v == 0.0));
    assert!(conv.weight.grad.data().iter().all(|v| *v == 0.0));
    assert!(conv.bias.grad.data().iter().all(|v| *v == 0.0));

    // single upstream pixel at output (oc=1, oy=1, ox=2): input rows 1..4, cols 3..6
    let mut dy = Tensor::zeros(y.shape());
    let (ho, wo) = (y.dim(2), y.dim(3));
    dy.data_mut()[(ho + 1) * wo + 2] = 1.0;
    conv.backward(&cache, &dy).unwrap();
    let g = conv.weight.grad.data();
    for ic in 0..2 {
        for ki in 0..3 {
            for kj in 0..3 {
                let patch = x.data()[(ic * 7 + 1 + ki) * 6 + 3 + kj];
                assert_eq!(g[18 + (ic * 3 + ki) * 3 + kj], patch);
                assert_eq!(g[(ic * 3 + ki) * 3 + kj], 0.0);
            }
        }
    }
    assert_eq!(conv.bias.grad.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn transposed_conv_is_the_adjoint_of_conv() {
    let mut rng = SplitMix64::new(11);
    let conv = Conv2d::<f64>::new("c", 3, 4, 3, 2, 1, &mut rng);
    let mut t = ConvTranspose2d::<f64>::new("t", 4, 3, 3, 2, 1, (9, 13), 3.0, &mut rng);
    t.weight.value = conv.weight.value.clone();
    let x = random(&[2, 3, 9, 13], 12);
    let (cx, _) = conv.forward(&x).unwrap();
    let y = random(cx.shape(), 13);
    let (ty, _) = t.forward(&y).unwrap();
    assert!((dot(&cx, &y) - dot(&x, &ty)).abs() < 1e-10);
}

/// Probes every parameter of a layer and its input gradient against
/// central differences of `L = sum(R * f(x))`.
fn check_input<F>(x: &Tensor<f64>, dx: &Tensor<f64>, f: F) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut g = |v: &[f64]| f(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap());
    grad_check(&mut g, x.data(), dx.data(), DEFAULT_STEP)
}

#[test]
fn conv_gradcheck() {
    let mut rng = SplitMix64::new(21);
    let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
    conv.bias.value = random(&[3], 22);
    let x = random(&[2, 2, 7, 8], 23);
    let (y, cache) = conv.forward(&x).unwrap();
    let r = random(y.shape(), 24);
    let dx = conv.backward(&cache, &r).unwrap();
    let loss = |c: &Conv2d<f64>| dot(&c.forward(&x).unwrap().0, &r);
    let e_in = check_input(&x, &dx, |xx| dot(&conv.forward(xx).unwrap().0, &r));
    let e_w = check_param(&mut conv, &|c| &mut c.weight, &loss, 1000, DEFAULT_STEP);
    let e_b = check_param(&mut conv, &|c| &mut c.bias, &loss, 1000, DEFAULT_STEP);
    assert!(e_in.max(e_w).max(e_b) < LAYER_TOL, "{e_in} {e_w} {e_b}");
}

#[test]
fn transposed_conv_gradcheck() {
    let mut rng = SplitMix64::new(31);
    let mut t = ConvTranspose2d::<f64>::new("t", 3, 2, 3, 2, 1, (9, 12), 3.0, &mut rng);
    t.bias.value = random(&[2], 32);
    let x = random(&[2, 3, 5, 6], 33);
    let (y, cache) = t.forward(&x).unwrap();
    let r = random(y.shape(), 34);
    let dx = t.backward(&cache, &r).unwrap();
    let loss = |c: &ConvTranspose2d<f64>| dot(&c.forward(&x).unwrap().0, &r);
    let e_in = check_input(&x, &dx, |xx| dot(&t.forward(xx).unwrap().0, &r));
    let e_w = check_param(&mut t, &|c| &mut c.weight, &loss, 1000, DEFAULT_STEP);
    let e_b = check_param(&mut t, &|c| &mut c.bias, &loss, 1000, DEFAULT_STEP);
    assert!(e_in.max(e_w).max(e_b) < LAYER_TOL, "{e_in} {e_w} {e_b}");
}

#[test]
fn dense_identity_and_gradcheck() {
    let mut rng = SplitMix64::new(41);
    let mut d = Dense::<f64>::new("d", 4, 4, 3.0, &mut rng);
    d.weight.value = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let x = random(&[3, 4], 42);
    assert_eq!(d.forward(&x).unwrap().0, x);
    assert!(d.forward(&Tensor::zeros(&[3, 5])).is_err());

    let mut d = Dense::<f64>::new("d", 6, 5, 3.0, &mut rng);
    d.bias.value = random(&[5], 43);
    let x = random(&[3, 6], 44);
    let (y, cache) = d.forward(&x).unwrap();
    let r = random(y.shape(), 45);
    let dx = d.backward(&cache, &r).unwrap();
    let loss = |m: &Dense<f64>| dot(&m.forward(&x).unwrap().0, &r);
    let e_in = check_input(&x, &dx, |xx| dot(&d.forward(xx).unwrap().0, &r));
    let e_w = check_param(&mut d, &|m| &mut m.weight, &loss, 1000, DEFAULT_STEP);
    let e_b = check_param(&mut d, &|m| &mut m.bias, &loss, 1000, DEFAULT_STEP);
    assert!(e_in.max(e_w).max(e_b) < LAYER_TOL, "{e_in} {e_w} {e_b}");
}

#[test]
fn layer_norm_examples_and_gradcheck() {
    let mut ln = LayerNorm::<f64>::new("ln", 6);
    let (y, _) = ln.forward(&Tensor::filled(&[1, 6], 3.5)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
    ln.beta.value.fill(0.25);
    let (y, _) = ln.forward(&Tensor::filled(&[1, 6], -2.0)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.25));
    ln.beta.value.fill(0.0);

    let x = random(&[3, 6], 51);
    let (y, _) = ln.forward(&x).unwrap();
    for r in 0..3 {
        let row = y.outer(r);
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }

    ln.gamma.value = random(&[6], 52);
    ln.beta.value = random(&[6], 53);
    let (y, cache) = ln.forward(&x).unwrap();
    let r = random(y.shape(), 54);
    let dx = ln.backward(&cache, &r).unwrap();
    let loss = |m: &LayerNorm<f64>| dot(&m.forward(&x).unwrap().0, &r);
    let e_in = check_input(&x, &dx, |xx| dot(&ln.forward(xx).unwrap().0, &r));
    let e_g = check_param(&mut ln, &|m| &mut m.gamma, &loss, 1000, DEFAULT_STEP);
    let e_b = check_param(&mut ln, &|m| &mut m.beta, &loss, 1000, DEFAULT_STEP);
    assert!(e_in.max(e_g).max(e_b) < LAYER_TOL, "{e_in} {e_g} {e_b}");
}

#[test]
fn relu_gradcheck() {
    // keep samples away from the kink
    let x = Tensor::from_fn(&[2, 5], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    let r = random(&[2, 5], 61);
    let y = relu(x.clone());
    let dx = relu_backward(&y, &r).unwrap();
    let e = check_input(&x, &dx, |xx| dot(&relu(xx.clone()), &r));
    assert!(e < LAYER_TOL);
}

#[test]
fn mse_gradcheck() {
    let p = random(&[4, 3], 71);
    let t = random(&[4, 3], 72);
    let (_, g) = mse(&p, &t).unwrap();
    assert!(check_input(&p, &g, |pp| mse(pp, &t).unwrap().0) < LAYER_TOL);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let (_, g) = masked_mse(&p, &t, &mask).unwrap();
    assert!(check_input(&p, &g, |pp| masked_mse(pp, &t, &mask).unwrap().0) < LAYER_TOL);
}

#[test]
fn gru_zero_params() {
    let mut rng = SplitMix64::new(81);
    let mut cell = GruCell::<f64>::new("g", 3, 4, &mut rng);
    cell.w.value.fill(0.0);
    cell.u.value.fill(0.0);
    let x = random(&[2, 3], 82);
    let h = random(&[2, 4], 83);
    let (h2, _) = cell.forward(&x, &h).unwrap();
    for (a, b) in h2.data().iter().zip(h.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
    let (h0, _) = cell.forward(&x, &Tensor::zeros(&[2, 4])).unwrap();
    assert!(h0.data().iter().all(|v| *v == 0.0));
    assert!(cell.forward(&x, &Tensor::zeros(&[2, 5])).is_err());
}

/// Runs `steps` GRU steps from `h0`, returning `sum_t <R_t, h_t>` and the
/// caches.
fn unroll(cell: &GruCell<f64>, xs: &[Tensor<f64>], h0: &Tensor<f64>, rs: &[Tensor<f64>]) -> (f64, Vec<GruCache<f64>>) {
    let mut h = h0.clone();
    let mut loss = 0.0;
    let mut caches = Vec::new();
    for (x, r) in xs.iter().zip(rs) {
        let (h2, c) = cell.forward(x, &h).unwrap();
        loss += dot(&h2, r);
        caches.push(c);
        h = h2;
    }
    (loss, caches)
}

#[test]
fn gru_bptt_gradcheck() {
    let mut rng = SplitMix64::new(91);
    let mut cell = GruCell::<f64>::new("g", 3, 4, &mut rng);
    cell.b.value = random(&[12], 92);
    let xs: Vec<_> = (0..5).map(|t| random(&[2, 3], 100 + t)).collect();
    let rs: Vec<_> = (0..5).map(|t| random(&[2, 4], 200 + t)).collect();
    let h0 = random(&[2, 4], 93);
    let (_, caches) = unroll(&cell, &xs, &h0, &rs);
    let mut dh = Tensor::zeros(&[2, 4]);
    let mut dxs = vec![Tensor::zeros(&[2, 3]); 5];
    for t in (0..5).rev() {
        dh.add_assign(&rs[t]).unwrap();
        let (dx, dprev) = cell.backward(&caches[t], &dh).unwrap();
        dxs[t] = dx;
        dh = dprev;
    }
    let loss = |c: &GruCell<f64>| unroll(c, &xs, &h0, &rs).0;
    let mut worst: f64 = 0.0;
    worst = worst.max(check_param(&mut cell, &|c| &mut c.w, &loss, 1000, DEFAULT_STEP));
    worst = worst.max(check_param(&mut cell, &|c| &mut c.u, &loss, 1000, DEFAULT_STEP));
    worst = worst.max(check_param(&mut cell, &|c| &mut c.b, &loss, 1000, DEFAULT_STEP));
    worst = worst.max(check_input(&h0, &dh, |hh| unroll(&cell, &xs, hh, &rs).0));
    worst = worst.max(check_input(&xs[0], &dxs[0], |xx| {
        let mut xs2 = xs.clone();
        xs2[0] = xx.clone();
        unroll(&cell, &xs2, &h0, &rs).0
    }));
    assert!(worst < LAYER_TOL, "{worst}");
}

#[test]
fn adamw_without_decay_is_adam() {
    let mut rng = SplitMix64::new(7);
    let mut p = Param::<f32>::new("p", Tensor::from_fn(&[64], |_| rng.uniform(-1.0, 1.0) as f32));
    let mut reference = p.value.data().to_vec();
    let (mut m, mut v) = (vec![0.0f32; 64], vec![0.0f32; 64]);
    let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
    for t in 1..=10 {
        let g: Vec<f32> = (0..64).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        p.grad = Tensor::from_vec(&[64], g.clone()).unwrap();
        opt.step([&mut p], 1e-2);
        let (bc1, bc2) = ((1.0 - 0.9f64.powi(t)) as f32, (1.0 - 0.999f64.powi(t)) as f32);
        for i in 0..64 {
            m[i] = 0.9 * m[i] + 0.1f64 as f32 * g[i];
            v[i] = 0.999 * v[i] + (1.0 - 0.999f64) as f32 * g[i] * g[i];
            reference[i] -= 1e-2 * (m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8);
        }
        assert_eq!(p.value.data(), reference.as_slice());
    }
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1e-9, 2e-9) - 0.1).abs() < 1e-12);
}
