//! Direct nested-loop references for the kernels behind the tape ops.

use actnet::{ConvSpec, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "element {i}: {x} vs {y}");
    }
}

fn conv2d_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (m, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
    let (xd, wdat) = (x.data(), w.data());
    let mut y = vec![0.0; m * o * oh * ow];
    for n in 0..m {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, q) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                acc += xd[((n * c + ic) * h + r as usize) * wd + q as usize]
                                    * wdat[((oc * c + ic) * k + u) * k + v];
                            }
                        }
                    }
                    y[((n * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

fn conv_t_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Vec<f64> {
    let (m, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(1), w.dim(2));
    let (oh, ow) = ((h - 1) * s + k - 2 * p, (wd - 1) * s + k - 2 * p);
    let mut y = vec![0.0; m * co * oh * ow];
    for n in 0..m {
        for oc in 0..co {
            y[(n * co + oc) * oh * ow..][..oh * ow].iter_mut().for_each(|v| *v = b[oc]);
        }
        for ic in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data()[((n * ci + ic) * h + i) * wd + j];
                    for oc in 0..co {
                        for u in 0..k {
                            for v in 0..k {
                                let (r, q) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                                if r < 0 || q < 0 || r >= oh as isize || q >= ow as isize {
                                    continue;
                                }
                                y[((n * co + oc) * oh + r as usize) * ow + q as usize] +=
                                    xv * w.data()[((ic * co + oc) * k + u) * k + v];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Vector-Jacobian products of `f` at `inputs` against central differences
/// of `<f(x), g>`.
fn check_vjp<G>(f: G, inputs: &[Tensor<f64>], seed: u64)
where
    G: for<'t> Fn(&[actnet::Var<'t, f64>]) -> actnet::Result<actnet::Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vs: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&vs).unwrap().value()
    };
    let g = rnd(eval(inputs).shape(), seed);
    let tape = Tape::new();
    let vs: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&vs).unwrap();
    let loss = y.mul(&tape.constant(g.clone())).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vs[i]);
        for e in (0..x.numel()).step_by(1 + x.numel() / 12) {
            let mut probe = inputs.to_vec();
            let mut plus = x.clone();
            plus.data_mut()[e] += h;
            probe[i] = plus;
            let fp = eval(&probe).dot(&g);
            let mut minus = x.clone();
            minus.data_mut()[e] -= h;
            probe[i] = minus;
            let fm = eval(&probe).dot(&g);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            assert!((a - numeric).abs() <= 1e-6 * (1.0 + a.abs()), "input {i} element {e}: {a} vs {numeric}");
        }
    }
}

#[test]
fn conv2d_matches_nested_loops() {
    for (trial, (c, o, h, w, k, s, p)) in [(3, 4, 7, 6, 3, 1, 1), (2, 5, 9, 8, 3, 2, 1), (4, 2, 6, 6, 1, 1, 0), (3, 3, 11, 10, 7, 2, 3)]
        .into_iter()
        .enumerate()
    {
        let seed = 10 * trial as u64;
        let (x, wt, b) = (rnd(&[2, c, h, w], seed), rnd(&[o, c, k, k], seed + 1), rnd(&[o], seed + 2));
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(wt.clone()), Some(&tape.constant(b.clone())), &ConvSpec::new(c, o, k, s, p))
            .unwrap();
        assert_close(y.value().data(), &conv2d_ref(&x, &wt, b.data(), s, p), 1e-12);
        let spec = ConvSpec::new(c, o, k, s, p);
        check_vjp(move |v| v[0].conv2d(&v[1], Some(&v[2]), &spec), &[x, wt, b], seed + 3);
    }
}

#[test]
fn conv_transpose2d_matches_nested_loops() {
    for (trial, (ci, co, h, w, k, s, p)) in [(3, 2, 4, 5, 4, 2, 1), (2, 3, 3, 3, 3, 1, 1), (4, 1, 2, 3, 4, 2, 1)].into_iter().enumerate() {
        let seed = 100 + 10 * trial as u64;
        let (x, wt, b) = (rnd(&[2, ci, h, w], seed), rnd(&[ci, co, k, k], seed + 1), rnd(&[co], seed + 2));
        let spec = ConvSpec::new(ci, co, k, s, p);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv_transpose2d(&tape.constant(wt.clone()), Some(&tape.constant(b.clone())), &spec)
            .unwrap();
        assert_close(y.value().data(), &conv_t_ref(&x, &wt, b.data(), s, p), 1e-12);
        check_vjp(move |v| v[0].conv_transpose2d(&v[1], Some(&v[2]), &spec), &[x, wt, b], seed + 3);
    }
}

#[test]
fn temporal_conv1d_matches_nested_loops() {
    let (n, c, t, o, k) = (2, 3, 5, 4, 3);
    let (x, w, b) = (rnd(&[n, c, t], 200), rnd(&[o, c, k], 201), rnd(&[o], 202));
    let mut want = vec![0.0; n * o * t];
    for s in 0..n {
        for oc in 0..o {
            for i in 0..t {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for u in 0..k {
                        let src = i as isize + u as isize - (k / 2) as isize;
                        if (0..t as isize).contains(&src) {
                            acc += x.data()[(s * c + ic) * t + src as usize] * w.data()[(oc * c + ic) * k + u];
                        }
                    }
                }
                want[(s * o + oc) * t + i] = acc;
            }
        }
    }
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv1d_temporal(&tape.constant(w.clone()), Some(&tape.constant(b.clone())))
        .unwrap();
    assert_close(y.value().data(), &want, 1e-12);
    check_vjp(|v| v[0].conv1d_temporal(&v[1], Some(&v[2])), &[x, w, b], 203);
}

#[test]
fn conv3d_matches_nested_loops() {
    let (n, t, h, w) = (2, 4, 5, 3);
    let (x, k, b) = (rnd(&[n, 1, t, h, w], 300), rnd(&[1, 1, 3, 3, 3], 301), rnd(&[1], 302));
    let mut want = vec![0.0; n * t * h * w];
    for s in 0..n {
        for (i, j, l) in (0..t).flat_map(|i| (0..h).flat_map(move |j| (0..w).map(move |l| (i, j, l)))) {
            let mut acc = b.data()[0];
            for (a, bb, cc) in (0..3).flat_map(|a| (0..3).flat_map(move |bb| (0..3).map(move |cc| (a, bb, cc)))) {
                let (ti, hj, wl) = (i + a, j + bb, l + cc);
                if ti < 1 || hj < 1 || wl < 1 || ti > t || hj > h || wl > w {
                    continue;
                }
                acc += x.data()[((s * t + ti - 1) * h + hj - 1) * w + wl - 1] * k.data()[(a * 3 + bb) * 3 + cc];
            }
            want[((s * t + i) * h + j) * w + l] = acc;
        }
    }
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv3d(&tape.constant(k.clone()), &tape.constant(b.clone()))
        .unwrap();
    assert_close(y.value().data(), &want, 1e-12);
    check_vjp(|v| v[0].conv3d(&v[1], &v[2]), &[x, k, b], 303);
}

#[test]
fn max_pool_and_bilinear_match_references() {
    let x = Tensor::<f64>::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
    let tape = Tape::new();
    let y = tape.constant(x).max_pool2x2().unwrap();
    assert_eq!(y.value().data(), &[5.0, 7.0]);

    // half-pixel bilinear, 2 -> 4: sources -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    let x = Tensor::<f64>::new(&[1, 2], vec![0.0, 4.0]).unwrap();
    let tape = Tape::new();
    let y = tape.constant(x).bilinear_resize(1, 4).unwrap();
    assert_close(y.value().data(), &[0.0, 1.0, 3.0, 4.0], 1e-12);
    check_vjp(|v| v[0].bilinear_resize(5, 3), &[rnd(&[2, 3, 4], 400)], 401);
    check_vjp(|v| v[0].bilinear_resize(2, 7), &[rnd(&[1, 3, 4], 402)], 403);
}
