use proptest::prelude::*;
use vlmdiff_nn::kernels::{self, ConvGeom};
use vlmdiff_nn::exec;

fn naive_conv(x: &[f32], n: usize, g: &ConvGeom, w: &[f32], b: &[f32], cout: usize) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![0.0f32; n * cout * ho * wo];
    for s in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o] as f64;
                    for c in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                                if iy < 0 || ix < 0 || iy >= g.h as i64 || ix >= g.w as i64 {
                                    continue;
                                }
                                let xv = x[((s * g.cin + c) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((o * g.cin + c) * g.k + ky) * g.k + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((s * cout + o) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (ConvGeom, usize, usize, Vec<f32>, Vec<f32>, Vec<f32>)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 3usize..9, 3usize..9)
        .prop_filter("kernel fits", |&(_, _, _, k, _, pad, h, w)| k <= h + 2 * pad && k <= w + 2 * pad)
        .prop_flat_map(|(n, cin, cout, k, stride, pad, h, w)| {
            let g = ConvGeom { cin, h, w, k, stride, pad };
            (
                Just(g),
                Just(n),
                Just(cout),
                prop::collection::vec(-2.0f32..2.0, n * cin * h * w),
                prop::collection::vec(-1.0f32..1.0, cout * cin * k * k),
                prop::collection::vec(-1.0f32..1.0, cout),
            )
        })
}

proptest! {
    #[test]
    fn conv_matches_direct_loops((g, n, cout, x, w, b) in conv_case()) {
        let want = naive_conv(&x, n, &g, &w, &b, cout);
        let got = kernels::conv2d_forward(&x, n, &g, &w, Some(&b), cout);
        let seq = exec::sequential(|| kernels::conv2d_forward(&x, n, &g, &w, Some(&b), cout));
        prop_assert_eq!(&got, &seq);
        for (a, e) in got.iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-4, "{} vs {}", a, e);
        }
    }

    #[test]
    fn gemm_matches_direct_loops(
        (m, k, n) in (1usize..7, 1usize..7, 1usize..7),
        ta in any::<bool>(),
        tb in any::<bool>(),
        seed in prop::collection::vec(-1.0f32..1.0, 49 * 2),
    ) {
        let a = &seed[..m * k];
        let b = &seed[49..49 + k * n];
        let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
        let mut c = vec![0.5f32; m * n];
        kernels::gemm(m, k, n, a, ta, b, tb, &mut c, 1.0);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = 0.5 + (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f32>();
                prop_assert!((c[i * n + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in prop::collection::vec(-30.0f32..30.0, 1..40), d in 1usize..6) {
        let len = x.len() / d * d;
        prop_assume!(len > 0);
        let y = kernels::softmax_rows(&x[..len], d);
        for row in y.chunks(d) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
