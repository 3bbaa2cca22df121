//! Reverse-mode gradients of every differentiable op against central
//! finite differences (h = 1e-5) on several random shapes.

use crate::common::{gradcheck, probe, rng};
use condmoe::tensor::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Positive-ish values spaced apart so top-k selection is stable under ±h.
fn spaced(rows: usize, cols: usize, seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|j| 0.1 + 0.3 * j as f64).collect();
        row.shuffle(&mut r);
        data.extend(row);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn check(name: &str, inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> condmoe::Result<Var>) {
    let err = gradcheck(inputs, build);
    assert!(err < TOL, "{name}: relative error {err:e}");
}

pub fn matmul_matches_finite_differences_tightly() {
    for (i, (m, k, n)) in [(3, 4, 2), (1, 5, 3), (4, 4, 4)].into_iter().enumerate() {
        let a = randn(&[m, k], i as u64);
        let b = randn(&[k, n], 100 + i as u64);
        let err = gradcheck(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 7)
        });
        assert!(err < 1e-6, "matmul {m}x{k}x{n}: {err:e}");
    }
}

pub fn linear_with_bias() {
    for (i, (rows, din, dout)) in [(3, 4, 2), (1, 3, 5), (6, 2, 2)].into_iter().enumerate() {
        let x = randn(&[rows, din], i as u64);
        let w = randn(&[dout, din], 10 + i as u64);
        let b = randn(&[dout], 20 + i as u64);
        check("linear", &[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, i as u64)
        });
    }
}

pub fn elementwise_ops() {
    for (i, shape) in [vec![5], vec![2, 3], vec![3, 1, 4]].into_iter().enumerate() {
        let a = randn(&shape, i as u64);
        let b = randn(&shape, 50 + i as u64);
        check("add/sub/mul", &[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            probe(t, m, 1)
        });
        check("gelu/exp/scale", &[a.clone()], |t, v| {
            let g = t.gelu(v[0]);
            let e = t.exp(t.scale(g, 0.5));
            probe(t, e, 2)
        });
        let c = randn(&shape, 99);
        check("add_const/mul_const", &[a.clone()], |t, v| {
            let y = t.add_const(v[0], &c)?;
            let y = t.mul_const(y, &c)?;
            probe(t, y, 3)
        });
        check("clamp interior", &[a], |t, v| {
            let y = t.clamp(v[0], -10.0, 10.0);
            probe(t, y, 4)
        });
    }
}

pub fn trailing_dim_affine() {
    for (i, (rows, d)) in [(1, 3), (4, 2), (3, 5)].into_iter().enumerate() {
        let x = randn(&[rows, d], i as u64);
        let g = randn(&[d], 30 + i as u64);
        let b = randn(&[d], 60 + i as u64);
        let s = randn(&[1], 90 + i as u64);
        check("mul_row/add_row/mul_scalar", &[x, g, b, s], |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            let y = t.add_row(y, v[2])?;
            let y = t.mul_scalar(y, v[3])?;
            probe(t, y, 5)
        });
    }
}

pub fn softmax_and_row_normalize() {
    for (i, (rows, d)) in [(1, 3), (4, 5), (2, 8)].into_iter().enumerate() {
        let x = randn(&[rows, d], i as u64);
        check("softmax", &[x.clone()], |t, v| {
            let y = t.softmax(v[0])?;
            probe(t, y, 6)
        });
        check("row_normalize", &[x], |t, v| {
            let y = t.row_normalize(t.exp(v[0]))?;
            probe(t, y, 7)
        });
    }
}

pub fn top_k_after_softmax() {
    for (i, (rows, e, k)) in [(1, 4, 2), (3, 8, 2), (2, 5, 1)].into_iter().enumerate() {
        let x = spaced(rows, e, i as u64);
        check("top_k", &[x], |t, v| {
            let p = t.softmax(v[0])?;
            let g = t.top_k_mask(p, k)?;
            probe(t, g, 8)
        });
    }
}

pub fn layernorm_all_inputs() {
    for (i, (rows, d)) in [(1, 4), (3, 6), (5, 2)].into_iter().enumerate() {
        let x = randn(&[rows, d], i as u64);
        let g = randn(&[d], 10 + i as u64);
        let b = randn(&[d], 20 + i as u64);
        check("layernorm", &[x, g, b], |t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, 9)
        });
    }
}

pub fn cosine_and_normalize() {
    for (i, d) in [2, 5, 9].into_iter().enumerate() {
        let u = randn(&[d], i as u64);
        let w = randn(&[d], 40 + i as u64);
        check("cosine", &[u.clone(), w.clone()], |t, v| t.cosine_similarity(v[0], v[1]));
        let m = randn(&[3, d], 70 + i as u64);
        check("l2_normalize_rows", &[m], |t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            probe(t, y, 10)
        });
    }
}

pub fn cross_entropy_with_smoothing() {
    for (i, (rows, c)) in [(1, 2), (3, 4), (5, 7)].into_iter().enumerate() {
        let x = randn(&[rows, c], i as u64);
        let targets: Vec<usize> = (0..rows).map(|r| (r * 3 + 1) % c).collect();
        check("cross_entropy", &[x], |t, v| t.cross_entropy_smoothed(v[0], &targets, 0.1));
    }
}

pub fn concat_gather_scatter() {
    for (i, (rows, da, db)) in [(2, 1, 3), (4, 3, 3), (3, 5, 2)].into_iter().enumerate() {
        let a = randn(&[rows, da], i as u64);
        let b = randn(&[rows, db], 10 + i as u64);
        check("concat", &[a.clone(), b], |t, v| {
            let y = t.concat(v[0], v[1])?;
            probe(t, y, 11)
        });
        let idx: Vec<usize> = (0..rows + 2).map(|r| (r * 7 + 1) % rows).collect();
        check("gather_rows", &[a.clone()], |t, v| {
            let y = t.gather_rows(v[0], &idx)?;
            probe(t, y, 12)
        });
        let a2 = randn(&[rows, da], 20 + i as u64);
        check("scatter_add_rows", &[a.clone(), a2], |t, v| {
            let sel: Vec<usize> = (0..rows).map(|r| (r + 1) % (rows + 1)).collect();
            let sel2: Vec<usize> = (0..rows).map(|r| r % 2).collect();
            let y = t.scatter_add_rows(rows + 1, da, &[(v[0], sel), (v[1], sel2)])?;
            probe(t, y, 13)
        });
        let s = randn(&[rows], 30 + i as u64);
        check("scale_rows/gather_flat", &[a, s], |t, v| {
            let picked = t.gather_flat(v[1], &(0..rows).rev().collect::<Vec<_>>())?;
            let y = t.scale_rows(v[0], picked)?;
            probe(t, y, 14)
        });
    }
}

pub fn pooling_ops() {
    for (i, (batch, seq, d)) in [(1, 3, 2), (2, 4, 3), (3, 2, 4)].into_iter().enumerate() {
        let x = randn(&[batch * seq, d], i as u64);
        let q = randn(&[d], 10 + i as u64);
        check("segment_mean", &[x.clone()], |t, v| {
            let y = t.segment_mean(v[0], seq)?;
            probe(t, y, 15)
        });
        check("attention_pool", &[x, q], |t, v| {
            let y = t.attention_pool(v[0], v[1], seq)?;
            probe(t, y, 16)
        });
    }
}

pub fn multi_head_attention() {
    for (i, (batch, seq, d, heads)) in [(1, 3, 4, 2), (2, 4, 6, 3), (2, 2, 4, 1)].into_iter().enumerate() {
        for causal in [false, true] {
            let q = randn(&[batch * seq, d], i as u64);
            let k = randn(&[batch * seq, d], 10 + i as u64);
            let vv = randn(&[batch * seq, d], 20 + i as u64);
            check("attention", &[q, k, vv], |t, v| {
                let y = t.attention(v[0], v[1], v[2], seq, heads, causal)?;
                probe(t, y, 17)
            });
        }
    }
}

pub fn replaying_a_tape_is_bit_identical() {
    let x = randn(&[4, 6], 1);
    let w = randn(&[3, 6], 2);
    let run = || {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let y = tape.linear(xv, wv, None).unwrap();
        let y = tape.softmax(y).unwrap();
        let loss = probe(&tape, y, 3).unwrap();
        let g = tape.backward(loss).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

pub const ALL: &[(&str, fn())] = &[
    ("matmul_matches_finite_differences_tightly", matmul_matches_finite_differences_tightly),
    ("linear_with_bias", linear_with_bias),
    ("elementwise_ops", elementwise_ops),
    ("trailing_dim_affine", trailing_dim_affine),
    ("softmax_and_row_normalize", softmax_and_row_normalize),
    ("top_k_after_softmax", top_k_after_softmax),
    ("layernorm_all_inputs", layernorm_all_inputs),
    ("cosine_and_normalize", cosine_and_normalize),
    ("cross_entropy_with_smoothing", cross_entropy_with_smoothing),
    ("concat_gather_scatter", concat_gather_scatter),
    ("pooling_ops", pooling_ops),
    ("multi_head_attention", multi_head_attention),
    ("replaying_a_tape_is_bit_identical", replaying_a_tape_is_bit_identical),
];
