//! Multi-scale deformable attention: each query predicts per-head sampling
//! offsets around its reference and aggregates bilinear samples of the value
//! maps with softmax weights.

use crate::autodiff::Var;
use crate::nn::{linear, Init, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct DeformCfg {
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
}

/// Where a query looks: either a bare point (plus the per-level cell size as
/// the offset normalizer) or a full box (offsets scale with its size).
#[derive(Clone, Debug)]
pub enum RefSpec {
    /// Normalized (x, y) per query; offsets are divided by the target
    /// level's grid size.
    Points(Vec<(f64, f64)>),
    /// Center-form (cx, cy, w, h) per query; offsets scale with
    /// `0.5 * wh / points`.
    Boxes(Vec<[f64; 4]>),
}

impl RefSpec {
    pub fn len(&self) -> usize {
        match self {
            RefSpec::Points(p) => p.len(),
            RefSpec::Boxes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn init_deform_attention(
    init: &mut Init,
    store: &mut ParamStore,
    prefix: &str,
    cfg: &DeformCfg,
    n_levels: usize,
) {
    init.linear(store, &format!("{prefix}.value"), cfg.dim, cfg.dim);
    // offsets start at a directional grid per head so the points spread out
    let hlp2 = cfg.heads * n_levels * cfg.points * 2;
    store.insert(
        &format!("{prefix}.offset.w"),
        Tensor::zeros(vec![cfg.dim, hlp2]),
    );
    let mut bias = vec![0.0; hlp2];
    for h in 0..cfg.heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / cfg.heads as f64;
        for l in 0..n_levels {
            for p in 0..cfg.points {
                let base = ((h * n_levels + l) * cfg.points + p) * 2;
                bias[base] = theta.cos() * (p + 1) as f64;
                bias[base + 1] = theta.sin() * (p + 1) as f64;
            }
        }
    }
    store.insert(&format!("{prefix}.offset.b"), Tensor::new(vec![hlp2], bias));
    init.linear_zero(
        store,
        &format!("{prefix}.attn"),
        cfg.dim,
        cfg.heads * n_levels * cfg.points,
    );
    init.linear(store, &format!("{prefix}.out"), cfg.dim, cfg.dim);
}

/// Forward pass. `value_levels` are the raw token maps per level (the value
/// projection is applied inside); `level_shapes` their (h, w) grids.
pub fn deform_attention(
    sess: &mut Session,
    prefix: &str,
    cfg: &DeformCfg,
    queries: Var,
    refs: &RefSpec,
    value_levels: &[Var],
    level_shapes: &[(usize, usize)],
) -> Var {
    let n_levels = value_levels.len();
    assert_eq!(level_shapes.len(), n_levels);
    let q = sess.g.value(queries).rows();
    assert_eq!(refs.len(), q, "one reference per query");
    let hlp = cfg.heads * n_levels * cfg.points;

    // shared value projection, then per-level row slices
    let all_values = sess.g.concat_rows(value_levels);
    let projected = linear(sess, &format!("{prefix}.value"), all_values);
    let mut proj_levels = Vec::with_capacity(n_levels);
    let mut offset_rows = 0;
    for &(h, w) in level_shapes {
        let lv = sess.g.slice_rows(projected, offset_rows, offset_rows + h * w);
        proj_levels.push(lv);
        offset_rows += h * w;
    }

    let offsets = linear(sess, &format!("{prefix}.offset"), queries);
    // scale offsets and add reference points: loc = ref + offset * scale
    let mut scale = Tensor::zeros(vec![q, hlp * 2]);
    let mut base = Tensor::zeros(vec![q, hlp * 2]);
    for qi in 0..q {
        for h in 0..cfg.heads {
            for (l, &(gh, gw)) in level_shapes.iter().enumerate() {
                for p in 0..cfg.points {
                    let col = ((h * n_levels + l) * cfg.points + p) * 2;
                    match refs {
                        RefSpec::Points(pts) => {
                            let (x, y) = pts[qi];
                            base.data_mut()[qi * hlp * 2 + col] = x;
                            base.data_mut()[qi * hlp * 2 + col + 1] = y;
                            scale.data_mut()[qi * hlp * 2 + col] = 1.0 / gw as f64;
                            scale.data_mut()[qi * hlp * 2 + col + 1] = 1.0 / gh as f64;
                        }
                        RefSpec::Boxes(boxes) => {
                            let [cx, cy, w, h2] = boxes[qi];
                            base.data_mut()[qi * hlp * 2 + col] = cx;
                            base.data_mut()[qi * hlp * 2 + col + 1] = cy;
                            scale.data_mut()[qi * hlp * 2 + col] =
                                0.5 * w / cfg.points as f64;
                            scale.data_mut()[qi * hlp * 2 + col + 1] =
                                0.5 * h2 / cfg.points as f64;
                        }
                    }
                }
            }
        }
    }
    let scaled = sess.g.mul_const(offsets, scale);
    let base_var = sess.g.constant(base);
    let locs = sess.g.add(scaled, base_var);

    // attention weights: softmax over levels x points within each head
    let attn_logits = linear(sess, &format!("{prefix}.attn"), queries);
    let grouped = sess.g.reshape(attn_logits, vec![q * cfg.heads, n_levels * cfg.points]);
    let weights = sess.g.softmax_rows(grouped);
    let weights = sess.g.reshape(weights, vec![q, hlp]);

    let sampled = sess.g.deform_sample(&proj_levels, level_shapes, locs, weights, cfg.heads);
    linear(sess, &format!("{prefix}.out"), sampled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Identity-weight setup: the mechanism must collapse to plain bilinear
    /// interpolation at the reference point.
    fn identity_store(dim: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        store.insert("da.value.w", eye.clone());
        store.insert("da.value.b", Tensor::zeros(vec![dim]));
        store.insert("da.offset.w", Tensor::zeros(vec![dim, 2]));
        store.insert("da.offset.b", Tensor::zeros(vec![2]));
        store.insert("da.attn.w", Tensor::zeros(vec![dim, 1]));
        store.insert("da.attn.b", Tensor::zeros(vec![1]));
        store.insert("da.out.w", eye);
        store.insert("da.out.b", Tensor::zeros(vec![dim]));
        store
    }

    fn bilinear(map: &Tensor, gh: usize, gw: usize, c: usize, x: f64, y: f64) -> f64 {
        let xp = (x * (gw as f64 - 1.0)).clamp(0.0, gw as f64 - 1.0);
        let yp = (y * (gh as f64 - 1.0)).clamp(0.0, gh as f64 - 1.0);
        let x0 = (xp.floor() as usize).min(gw - 1);
        let y0 = (yp.floor() as usize).min(gh - 1);
        let x1 = (x0 + 1).min(gw - 1);
        let y1 = (y0 + 1).min(gh - 1);
        let fx = xp - x0 as f64;
        let fy = yp - y0 as f64;
        map.at2(y0 * gw + x0, c) * (1.0 - fx) * (1.0 - fy)
            + map.at2(y0 * gw + x1, c) * fx * (1.0 - fy)
            + map.at2(y1 * gw + x0, c) * (1.0 - fx) * fy
            + map.at2(y1 * gw + x1, c) * fx * fy
    }

    #[test]
    fn collapses_to_bilinear_sample_at_reference() {
        let dim = 3;
        let store = identity_store(dim);
        let cfg = DeformCfg { dim, heads: 1, points: 1 };
        let (gh, gw) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = Tensor::new(
            vec![gh * gw, dim],
            (0..gh * gw * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        for &(rx, ry) in &[(0.37, 0.61), (0.0, 0.0), (1.0, 1.0), (0.5, 0.25)] {
            let mut sess = Session::new(&store);
            let queries = sess.g.leaf(Tensor::zeros(vec![1, dim]));
            let values = sess.g.leaf(map.clone());
            let refs = RefSpec::Points(vec![(rx, ry)]);
            let out = deform_attention(&mut sess, "da", &cfg, queries, &refs, &[values], &[(gh, gw)]);
            for c in 0..dim {
                let want = bilinear(&map, gh, gw, c, rx, ry);
                let got = sess.g.value(out).at2(0, c);
                assert!(
                    (got - want).abs() <= 1e-12,
                    "({rx},{ry}) channel {c}: got {got} want {want}"
                );
            }
        }
        // reference exactly on a grid node returns that node's value
        let (nx, ny) = (2usize, 1usize);
        let rx = nx as f64 / (gw as f64 - 1.0);
        let ry = ny as f64 / (gh as f64 - 1.0);
        let mut sess = Session::new(&store);
        let queries = sess.g.leaf(Tensor::zeros(vec![1, dim]));
        let values = sess.g.leaf(map.clone());
        let refs = RefSpec::Points(vec![(rx, ry)]);
        let out = deform_attention(&mut sess, "da", &cfg, queries, &refs, &[values], &[(gh, gw)]);
        for c in 0..dim {
            assert!((sess.g.value(out).at2(0, c) - map.at2(ny * gw + nx, c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn matches_loop_oracle_on_random_two_level_case() {
        let dim = 8;
        let heads = 2;
        let points = 3;
        let cfg = DeformCfg { dim, heads, points };
        let mut store = ParamStore::new();
        let mut init = Init::new(33);
        init_deform_attention(&mut init, &mut store, "da", &cfg, 2);
        // randomize the zero-initialized heads so the oracle sees real work
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for name in ["da.offset.w", "da.attn.w", "da.attn.b"] {
            for v in store.get_mut(name).data_mut() {
                *v = rng.gen_range(-0.8..0.8);
            }
        }
        let shapes = [(5usize, 6usize), (2usize, 3usize)];
        let maps: Vec<Tensor> = shapes
            .iter()
            .map(|&(h, w)| {
                Tensor::new(
                    vec![h * w, dim],
                    (0..h * w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let n_q = 4;
        let queries = Tensor::new(
            vec![n_q, dim],
            (0..n_q * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let refs: Vec<(f64, f64)> = (0..n_q)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();

        let mut sess = Session::new(&store);
        let qv = sess.g.leaf(queries.clone());
        let v0 = sess.g.leaf(maps[0].clone());
        let v1 = sess.g.leaf(maps[1].clone());
        let out = deform_attention(
            &mut sess,
            "da",
            &cfg,
            qv,
            &RefSpec::Points(refs.clone()),
            &[v0, v1],
            &shapes,
        );
        let got = sess.g.value(out).clone();

        // loop oracle: recompute everything with plain scalar math
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (ins, outs) = (w.rows(), w.cols());
            assert_eq!(x.len(), ins);
            (0..outs)
                .map(|o| {
                    b.data()[o] + (0..ins).map(|i| x[i] * w.at2(i, o)).sum::<f64>()
                })
                .collect()
        };
        let vw = store.get("da.value.w");
        let vb = store.get("da.value.b");
        let proj: Vec<Tensor> = maps
            .iter()
            .map(|m| {
                let rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| lin(m.row(r), vw, vb)).collect();
                Tensor::from_rows(&rows)
            })
            .collect();
        let dh = dim / heads;
        let mut want = Tensor::zeros(vec![n_q, dim]);
        for qi in 0..n_q {
            let off = lin(queries.row(qi), store.get("da.offset.w"), store.get("da.offset.b"));
            let alog = lin(queries.row(qi), store.get("da.attn.w"), store.get("da.attn.b"));
            for h in 0..heads {
                // softmax within head over levels x points
                let group: Vec<f64> = (0..2 * points)
                    .map(|i| alog[h * 2 * points + i])
                    .collect();
                let mx = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = group.iter().map(|&g| (g - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for (l, &(gh, gw)) in shapes.iter().enumerate() {
                    for p in 0..points {
                        let flat = (h * 2 + l) * points + p;
                        let wgt = exps[l * points + p] / denom;
                        let x = refs[qi].0 + off[flat * 2] / gw as f64;
                        let y = refs[qi].1 + off[flat * 2 + 1] / gh as f64;
                        for c in 0..dh {
                            let cc = h * dh + c;
                            want.data_mut()[qi * dim + cc] +=
                                wgt * bilinear(&proj[l], gh, gw, cc, x, y);
                        }
                    }
                }
            }
        }
        // output projection
        let ow = store.get("da.out.w");
        let ob = store.get("da.out.b");
        let want_rows: Vec<Vec<f64>> = (0..n_q).map(|r| lin(want.row(r), ow, ob)).collect();
        let want = Tensor::from_rows(&want_rows);
        for i in 0..got.len() {
            assert!(
                (got.data()[i] - want.data()[i]).abs() < 1e-5,
                "elem {i}: got {} want {}",
                got.data()[i],
                want.data()[i]
            );
        }
    }
}
