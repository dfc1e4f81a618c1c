//! Finite-difference checks of the tape gradients on random instances.

use rand::Rng;
use serde::Serialize;

use super::episode::build_support;
use super::loss::Beta;
use super::{Hyperparams, LossMode};
use crate::autodiff::{Tape, Var};
use crate::encoder::{EmbeddingSource, EncoderVars, EncodingSession};
use crate::kg::{EntityId, NeighborIndex, RelationId};
use crate::seed::rng_for;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Which scalar function is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    /// `½‖xᵀW‖²`
    Linear,
    /// The neighbor relevance MLP.
    Relevance,
    /// Sum of one entity encoding, through neighbor attention.
    Encoder,
    /// `½‖R(h', t')‖²` for free `h'`, `t'`.
    Projection,
    /// Support loss from raw embeddings and encoder weights through the mean
    /// relation, negative attention and the log-sigmoid loss.
    SupportLoss { differentiate_beta: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradCheckSpec {
    pub dim: usize,
    pub neighbors: usize,
    pub support: usize,
    pub negatives: usize,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            dim: 8,
            neighbors: 3,
            support: 2,
            negatives: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub params: usize,
    /// `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`, 0 when both vanish.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub target: GradTarget,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

struct Instance {
    names: Vec<String>,
    groups: Vec<Vec<f64>>,
    /// Row count for matrix groups, `None` for vectors and row tables.
    shapes: Vec<Option<usize>>,
    extra: Extra,
}

enum Extra {
    None,
    Graph {
        index: NeighborIndex,
        support: Vec<(EntityId, EntityId)>,
        pools: Vec<Vec<EntityId>>,
        dim: usize,
    },
}

/// Rows read from two flat groups.
struct DenseRows<'a> {
    dim: usize,
    entities: &'a [f64],
    relations: &'a [f64],
}

impl EmbeddingSource for DenseRows<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn entity_row(&self, e: EntityId) -> Vec<f64> {
        self.entities[e * self.dim..(e + 1) * self.dim].to_vec()
    }

    fn relation_row(&self, r: RelationId) -> Vec<f64> {
        self.relations[r * self.dim..(r + 1) * self.dim].to_vec()
    }
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    random_vec(rng, rows * cols, (6.0 / (rows + cols) as f64).sqrt())
}

fn encoder_groups(rng: &mut impl Rng, d: usize) -> Vec<(String, Vec<f64>, Option<usize>)> {
    let shapes = [(2 * d, d), (d, 1), (2 * d, d), (d, d), (2 * d, d)];
    shapes
        .iter()
        .enumerate()
        .map(|(k, &(r, c))| (format!("W{}", k + 1), xavier(rng, r, c), Some(r)))
        .collect()
}

fn build_instance(target: GradTarget, spec: &GradCheckSpec, rng: &mut impl Rng) -> Instance {
    let d = spec.dim;
    let mut groups: Vec<(String, Vec<f64>, Option<usize>)> = Vec::new();
    let mut extra = Extra::None;
    match target {
        GradTarget::Linear => {
            groups.push(("W".into(), random_vec(rng, (d + 1) * d, 1.0), Some(d + 1)));
            groups.push(("x".into(), random_vec(rng, d + 1, 1.0), None));
        }
        GradTarget::Relevance => {
            let mut enc = encoder_groups(rng, d);
            enc.truncate(2);
            groups.extend(enc);
            groups.push(("r".into(), random_vec(rng, d, 1.0), None));
            groups.push(("r_i".into(), random_vec(rng, d, 1.0), None));
        }
        GradTarget::Projection => {
            groups.push(encoder_groups(rng, d).remove(4));
            groups.push(("h'".into(), random_vec(rng, d, 1.0), None));
            groups.push(("t'".into(), random_vec(rng, d, 1.0), None));
        }
        GradTarget::Encoder | GradTarget::SupportLoss { .. } => {
            let support = spec.support.max(1);
            let n_neg = spec.negatives.max(1);
            let n_rel = 2 * spec.neighbors.max(1);
            let n_ent = 2 * support + n_neg + 2;
            let mut enc = encoder_groups(rng, d);
            if target == GradTarget::Encoder {
                enc.truncate(4);
            }
            groups.extend(enc);
            groups.push(("entities".into(), random_vec(rng, n_ent * d, 0.5), None));
            groups.push(("relations".into(), random_vec(rng, n_rel * d, 0.5), None));
            let lists = (0..n_ent)
                .map(|e| {
                    (0..spec.neighbors)
                        .map(|_| {
                            let mut c = rng.gen_range(0..n_ent - 1);
                            if c >= e {
                                c += 1;
                            }
                            (rng.gen_range(0..n_rel), c)
                        })
                        .collect()
                })
                .collect();
            let index = NeighborIndex::from_lists(lists, n_rel / 2);
            let pairs: Vec<(EntityId, EntityId)> = (0..support).map(|i| (2 * i, 2 * i + 1)).collect();
            let pools = pairs
                .iter()
                .map(|_| {
                    let mut pool: Vec<EntityId> = (2 * support..n_ent).collect();
                    while pool.len() > n_neg {
                        pool.remove(rng.gen_range(0..pool.len()));
                    }
                    pool
                })
                .collect();
            extra = Extra::Graph {
                index,
                support: pairs,
                pools,
                dim: d,
            };
        }
    }
    let mut inst = Instance {
        names: Vec::new(),
        groups: Vec::new(),
        shapes: Vec::new(),
        extra,
    };
    for (n, g, s) in groups {
        inst.names.push(n);
        inst.groups.push(g);
        inst.shapes.push(s);
    }
    inst
}

fn bind(tape: &mut Tape, values: &[f64], shape: Option<usize>) -> Var {
    match shape {
        Some(rows) => tape.matrix_leaf_raw(rows, values.to_vec()),
        None => tape.leaf(values.to_vec()),
    }
}

struct Evaluation {
    value: f64,
    grads: Vec<Vec<f64>>,
    /// Smallest absolute LeakyReLU pre-activation encountered.
    margin: f64,
    /// Negative weights of the support loss, if any.
    weights: Vec<Vec<f64>>,
}

/// Evaluates the target; `fixed_beta` pins the negative weights for the
/// detached-attention variant.
fn evaluate(
    target: GradTarget,
    inst: &Instance,
    groups: &[Vec<f64>],
    want_grad: bool,
    fixed_beta: Option<&[Vec<f64>]>,
) -> Evaluation {
    let mut tape = Tape::new();
    let slope = crate::encoder::DEFAULT_LEAKY_SLOPE;
    let kink = |tape: &Tape, pre: Var| tape.value(pre).iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    match target {
        GradTarget::Linear | GradTarget::Relevance | GradTarget::Projection => {
            let vars: Vec<Var> = groups
                .iter()
                .zip(&inst.shapes)
                .map(|(g, &s)| bind(&mut tape, g, s))
                .collect();
            let (loss, margin) = match target {
                GradTarget::Linear => {
                    let y = tape.vec_mat(vars[1], vars[0]);
                    let sq = tape.dot(y, y);
                    (tape.scale(sq, 0.5), f64::INFINITY)
                }
                GradTarget::Relevance => {
                    let x = tape.concat(vars[2], vars[3]);
                    let hidden = tape.vec_mat(x, vars[0]);
                    let act = tape.tanh(hidden);
                    let s = tape.vec_mat(act, vars[1]);
                    (tape.sum(s), f64::INFINITY)
                }
                _ => {
                    let x = tape.concat(vars[1], vars[2]);
                    let pre = tape.vec_mat(x, vars[0]);
                    let margin = kink(&tape, pre);
                    let out = tape.leaky_relu(pre, slope);
                    let sq = tape.dot(out, out);
                    (tape.scale(sq, 0.5), margin)
                }
            };
            let value = tape.scalar(loss);
            let grads = if want_grad {
                let g = tape.backward(loss);
                vars.iter().zip(groups).map(|(&v, x)| g.get_or_zero(v, x.len())).collect()
            } else {
                Vec::new()
            };
            Evaluation {
                value,
                grads,
                margin,
                weights: Vec::new(),
            }
        }
        GradTarget::Encoder | GradTarget::SupportLoss { .. } => {
            let Extra::Graph {
                index,
                support,
                pools,
                dim,
            } = &inst.extra
            else {
                unreachable!("graph targets carry a graph instance")
            };
            let n_enc = groups.len() - 2;
            let mats: Vec<Var> = (0..n_enc)
                .map(|k| bind(&mut tape, &groups[k], inst.shapes[k]))
                .collect();
            let unused = tape.constant(vec![0.0]);
            let enc = EncoderVars {
                w1: mats[0],
                w2: mats[1],
                w3: mats[2],
                w4: mats[3],
                w5: mats.get(4).copied().unwrap_or(unused),
                leaky_slope: slope,
            };
            let source = DenseRows {
                dim: *dim,
                entities: &groups[n_enc],
                relations: &groups[n_enc + 1],
            };
            let mut sess = EncodingSession::with_encoder(tape, enc, &source, index, true);
            let mut weights = Vec::new();
            let (loss, margin) = if let GradTarget::SupportLoss { differentiate_beta } = target {
                let mut margin = f64::INFINITY;
                for &(h, t) in support {
                    let p = sess.pair(h, t);
                    let x = sess.tape.concat(p.h_prime, p.t_prime);
                    let pre = sess.tape.vec_mat(x, sess.enc.w5);
                    margin = margin.min(kink(&sess.tape, pre));
                }
                let hyper = Hyperparams {
                    num_negatives: pools.iter().map(Vec::len).max().unwrap_or(1),
                    loss_mode: LossMode::Attention,
                    ..Hyperparams::default()
                };
                let mut rng = rng_for(0, "gradcheck-unused", &[]);
                let beta = match (differentiate_beta, fixed_beta) {
                    (true, _) => Beta::Differentiate,
                    (false, Some(w)) => Beta::Fixed(w),
                    (false, None) => Beta::Detach,
                };
                let side = build_support(&mut sess, support, pools, pools, &hyper, beta, &mut rng)
                    .expect("gradient-check support side");
                weights = side.weights;
                (side.loss, margin)
            } else {
                let (h, t) = support[0];
                let seed = sess.seed(h, t);
                let out = sess.encode(h, seed);
                (sess.tape.sum(out), f64::INFINITY)
            };
            let value = sess.tape.scalar(loss);
            let grads = if want_grad {
                let g = sess.tape.backward(loss);
                let mut out: Vec<Vec<f64>> = mats
                    .iter()
                    .zip(groups)
                    .map(|(&v, x)| g.get_or_zero(v, x.len()))
                    .collect();
                let mut ent = vec![0.0; groups[n_enc].len()];
                for (e, v) in sess.entity_leaves() {
                    if let Some(ge) = g.get(v) {
                        ent[e * dim..(e + 1) * dim].copy_from_slice(ge);
                    }
                }
                let mut rel = vec![0.0; groups[n_enc + 1].len()];
                for (r, v) in sess.relation_leaves() {
                    if let Some(gr) = g.get(v) {
                        rel[r * dim..(r + 1) * dim].copy_from_slice(gr);
                    }
                }
                out.push(ent);
                out.push(rel);
                out
            } else {
                Vec::new()
            };
            Evaluation {
                value,
                grads,
                margin,
                weights,
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares analytic gradients against central differences for every
/// parameter group of a random instance. Passes iff the largest group
/// relative error is below `tolerance`.
///
/// With detached attention the finite differences hold the weights at
/// their base-point values. Instances whose LeakyReLU pre-activations come within `1e-3` of the kink
/// are redrawn, since finite differences are invalid there.
pub fn gradient_check(target: GradTarget, spec: &GradCheckSpec, tolerance: f64) -> GradCheckReport {
    let mut attempt = 0u64;
    let inst = loop {
        let mut rng = rng_for(spec.seed, "gradcheck", &[attempt]);
        let inst = build_instance(target, spec, &mut rng);
        if evaluate(target, &inst, &inst.groups, false, None).margin > 1e-3 || attempt >= 64 {
            break inst;
        }
        attempt += 1;
    };
    let base = evaluate(target, &inst, &inst.groups, true, None);
    let analytic = &base.grads;
    let pinned = match target {
        GradTarget::SupportLoss {
            differentiate_beta: false,
        } => Some(base.weights.as_slice()),
        _ => None,
    };
    let mut groups = inst.groups.clone();
    let mut report = Vec::with_capacity(groups.len());
    for g in 0..groups.len() {
        let mut numeric = vec![0.0; groups[g].len()];
        for k in 0..groups[g].len() {
            let orig = groups[g][k];
            groups[g][k] = orig + FD_STEP;
            let plus = evaluate(target, &inst, &groups, false, pinned).value;
            groups[g][k] = orig - FD_STEP;
            let minus = evaluate(target, &inst, &groups, false, pinned).value;
            groups[g][k] = orig;
            numeric[k] = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff: Vec<f64> = analytic[g].iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic[g]).max(norm(&numeric));
        let rel_error = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        report.push(GroupError {
            group: inst.names[g].clone(),
            params: numeric.len(),
            rel_error,
        });
    }
    let max_rel_error = report.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    GradCheckReport {
        target,
        groups: report,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TARGETS: [GradTarget; 6] = [
        GradTarget::Linear,
        GradTarget::Relevance,
        GradTarget::Encoder,
        GradTarget::Projection,
        GradTarget::SupportLoss {
            differentiate_beta: true,
        },
        GradTarget::SupportLoss {
            differentiate_beta: false,
        },
    ];

    #[test]
    fn linear_is_near_exact() {
        let r = gradient_check(GradTarget::Linear, &GradCheckSpec::default(), 1e-8);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn every_target_passes() {
        for target in TARGETS {
            for seed in 0..3 {
                let spec = GradCheckSpec {
                    seed,
                    ..GradCheckSpec::default()
                };
                let r = gradient_check(target, &spec, 1e-4);
                assert!(r.passed, "{r:?}");
                assert!(r.groups.iter().all(|g| g.params > 0));
            }
        }
    }

    #[test]
    fn support_loss_covers_all_groups() {
        let r = gradient_check(
            GradTarget::SupportLoss {
                differentiate_beta: true,
            },
            &GradCheckSpec::default(),
            1e-4,
        );
        let names: Vec<&str> = r.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["W1", "W2", "W3", "W4", "W5", "entities", "relations"]);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let r = gradient_check(GradTarget::Linear, &GradCheckSpec::default(), 0.0);
        assert!(!r.passed);
        assert_eq!(r.groups.len(), 2);
    }
}
