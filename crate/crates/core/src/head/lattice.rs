//! Pyramid pooling and the densely connected downsampling lattice that
//! turns `q0..q3` into the global context set `g0..g3`.

use crate::error::{shape_err, Error, Result};
use crate::fpn::PYRAMID_CHANNELS;
use crate::nn::{Builder, Conv};
use crate::tensor::{Element, Graph, NodeId};

/// Static description of the lattice for one pool size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticePlan {
    pub pool_size: (usize, usize),
    /// Channel width of branch `j`'s entry concatenation.
    pub entry_channels: [usize; 4],
    /// Stride-2 blocks applied after entry, per branch.
    pub blocks: [usize; 4],
    /// `connectivity[j][k]`: pooled level `k` reaches `g_j`.
    pub connectivity: [[bool; 4]; 4],
}

impl LatticePlan {
    pub fn new(pool_size: (usize, usize)) -> Result<Self> {
        let (m, n) = pool_size;
        if m == 0 || n == 0 || m % 8 != 0 || n % 8 != 0 {
            return Err(Error::Config(format!("pool size {m}x{n} must be positive multiples of 8")));
        }
        let mut connectivity = [[false; 4]; 4];
        for (j, row) in connectivity.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = k <= j;
            }
        }
        Ok(Self {
            pool_size,
            entry_channels: [1, 2, 3, 4].map(|k| k * PYRAMID_CHANNELS),
            blocks: [3, 2, 1, 0],
            connectivity,
        })
    }

    /// Extents of stage `t`.
    pub fn stage_extent(&self, t: usize) -> (usize, usize) {
        (self.pool_size.0 >> t, self.pool_size.1 >> t)
    }
}

/// `q_i = adaptive_avg_pool(p_{i+2})` at `(M, N) / 2^i`. A level whose
/// extent already equals the target passes through unchanged.
pub fn pool_pyramid<T: Element>(g: &mut Graph<'_, T>, levels: [NodeId; 4], plan: &LatticePlan) -> Result<[NodeId; 4]> {
    let mut out = levels;
    for (i, (&p, q)) in levels.iter().zip(out.iter_mut()).enumerate() {
        let (oh, ow) = plan.stage_extent(i);
        let (_, _, h, w) = g.value(p).nchw();
        if oh > h || ow > w {
            return shape_err("pool_pyramid", format!("pool {oh}x{ow} exceeds level {} of {h}x{w}", i + 2));
        }
        if (oh, ow) != (h, w) {
            *q = g.adaptive_avg_pool(p, oh, ow)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseLattice {
    plan: LatticePlan,
    /// `blocks[j][t]`: the `t`-th downsampling block of branch `j`.
    blocks: Vec<Vec<Conv>>,
    reduce: Conv,
}

/// Entry concatenations and final outputs of every branch.
#[derive(Clone, Copy, Debug)]
pub struct LatticeOutput {
    pub entries: [NodeId; 4],
    pub g: [NodeId; 4],
}

impl DenseLattice {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, plan: LatticePlan) -> Result<Self> {
        let c = PYRAMID_CHANNELS;
        let mut blocks = Vec::with_capacity(4);
        for j in 0..4 {
            let mut branch = Vec::with_capacity(plan.blocks[j]);
            for t in 0..plan.blocks[j] {
                let cin = if t == 0 { plan.entry_channels[j] } else { c };
                branch.push(b.conv(&format!("head.lattice.b{j}.d{t}"), cin, c, 3, 2)?);
            }
            blocks.push(branch);
        }
        let reduce = b.conv("head.lattice.b3.reduce", plan.entry_channels[3], c, 1, 1)?;
        Ok(Self { plan, blocks, reduce })
    }

    pub fn plan(&self) -> &LatticePlan {
        &self.plan
    }

    pub fn param_count(plan: &LatticePlan) -> usize {
        let c = PYRAMID_CHANNELS;
        let mut total = Conv::param_count(plan.entry_channels[3], c, 1);
        for j in 0..4 {
            for t in 0..plan.blocks[j] {
                let cin = if t == 0 { plan.entry_channels[j] } else { c };
                total += Conv::param_count(cin, c, 3);
            }
        }
        total
    }

    /// Branch `t` joins at stage `t` by concatenating `q_t` with every
    /// earlier branch's running feature, then all active branches step
    /// down one stage. Branch 3 only gets the 1×1 reduction.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, q: [NodeId; 4]) -> Result<LatticeOutput> {
        let mut running: Vec<NodeId> = Vec::with_capacity(4);
        let mut entries = q;
        for t in 0..4 {
            let want = self.plan.stage_extent(t);
            for &x in running.iter().chain(std::iter::once(&q[t])) {
                let (_, _, h, w) = g.value(x).nchw();
                if (h, w) != want {
                    return shape_err("dense_global_context", format!("stage {t} expects {want:?}, got {h}x{w}"));
                }
            }
            let mut parts = vec![q[t]];
            parts.extend(&running);
            entries[t] = if parts.len() == 1 { q[t] } else { g.concat_channels(&parts)? };
            running.push(entries[t]);
            if t == 3 {
                running[3] = self.reduce.forward_relu(g, entries[3])?;
                break;
            }
            for (k, h) in running.iter_mut().enumerate() {
                *h = self.blocks[k][t - k].forward_relu(g, *h)?;
            }
        }
        Ok(LatticeOutput {
            entries,
            g: [running[0], running[1], running[2], running[3]],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn full_scale_pool_size_shapes() {
        let plan = LatticePlan::new((64, 96)).unwrap();
        let mut store = ParamStore::<f32>::new();
        let lat = DenseLattice::new(&mut Builder::new(&mut store, 0), plan.clone()).unwrap();
        let mut g = Graph::new(&store);
        let levels = [(128, 192), (64, 96), (32, 48), (16, 24)].map(|(h, w)| g.input(Tensor::zeros(&[1, 256, h, w])));
        let q = pool_pyramid(&mut g, levels, &plan).unwrap();
        let shapes: Vec<Vec<usize>> = q.iter().map(|&x| g.value(x).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 256, 64, 96], vec![1, 256, 32, 48], vec![1, 256, 16, 24], vec![1, 256, 8, 12]]);
        let out = lat.forward(&mut g, q).unwrap();
        for (j, &e) in out.entries.iter().enumerate() {
            assert_eq!(g.value(e).dim(1), 256 * (j + 1));
        }
        for &x in &out.g {
            assert_eq!(g.value(x).shape(), &[1, 256, 8, 12]);
        }
    }

    #[test]
    fn pool_larger_than_level_is_rejected() {
        let plan = LatticePlan::new((16, 16)).unwrap();
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let levels = [16, 8, 4, 1].map(|s| g.input(Tensor::zeros(&[1, 256, s, s])));
        assert!(pool_pyramid(&mut g, levels, &plan).is_err());
        assert!(LatticePlan::new((12, 16)).is_err());
    }

    #[test]
    fn pooling_keeps_constants_and_means() {
        let plan = LatticePlan::new((16, 16)).unwrap();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let levels = [32, 16, 8, 4].map(|s| g.input(random(&[1, 256, s, s], &mut rng)));
        let q = pool_pyramid(&mut g, levels, &plan).unwrap();
        for (&p, &qi) in levels.iter().zip(&q) {
            assert!((g.value(p).mean() - g.value(qi).mean()).abs() < 1e-6);
        }
        let c = g.input(Tensor::full(&[1, 256, 32, 32], 1.5));
        let q = pool_pyramid(&mut g, [c, levels[1], levels[2], levels[3]], &plan).unwrap();
        assert!(g.value(q[0]).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn zero_weights_give_zero_context() {
        let plan = LatticePlan::new((16, 16)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let lat = DenseLattice::new(&mut Builder::new(&mut store, 0), plan).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let q = [16, 8, 4, 2].map(|s| g.input(random(&[1, 256, s, s], &mut rng)));
        let out = lat.forward(&mut g, q).unwrap();
        for &x in &out.g {
            assert_eq!(g.value(x).shape(), &[1, 256, 2, 2]);
            assert!(g.value(x).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sensitivity_matches_connectivity() {
        let plan = LatticePlan::new((16, 16)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let lat = DenseLattice::new(&mut Builder::new(&mut store, 9), plan.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // positive inputs keep most ReLUs open
        let base: Vec<Tensor<f64>> = [16, 8, 4, 2]
            .iter()
            .map(|&s| random(&[1, 256, s, s], &mut rng).map(|v| v.abs()))
            .collect();
        let run = |qs: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
            let mut g = Graph::new(&store);
            let q = [0, 1, 2, 3].map(|i| g.input(qs[i].clone()));
            let out = lat.forward(&mut g, q).unwrap();
            out.g.iter().map(|&x| g.value(x).clone()).collect()
        };
        let reference = run(&base);
        for k in 0..4 {
            let mut qs = base.clone();
            qs[k] = qs[k].map(|v| v + 0.5);
            let moved = run(&qs);
            for j in 0..4 {
                let diff: f64 = moved[j].data().iter().zip(reference[j].data()).map(|(a, b)| (a - b).abs()).sum();
                assert_eq!(diff > 0.0, plan.connectivity[j][k], "q{k} -> g{j}: diff {diff}");
            }
        }
    }
}
