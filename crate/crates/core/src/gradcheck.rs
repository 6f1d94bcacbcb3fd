//! Central finite-difference gradient checks for every differentiable
//! operation, run in 64-bit mode.
//!
//! Each op gets an instance generator that keeps inputs away from the op's
//! kinks (ties for min/max, zeros for abs, clamp boundaries, near-zero
//! norms), where a subgradient choice would disagree with the symmetric
//! difference quotient. The relative-error denominator is floored so
//! true-zero gradients compare by absolute error instead of blowing up.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rngutil;
use crate::tensor::blocks::{self, BlockConfig, Dropout};
use crate::tensor::{ParamStore, Tape, TensorId};
use crate::train::loss as tloss;

pub const THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub instances: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < THRESHOLD
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4)
}

/// Compare analytic gradients against central differences for a scalar
/// function of a flat parameter vector.
pub fn check_fn(
    theta: &[f64],
    mut value: impl FnMut(&[f64]) -> f64,
    grad: impl FnOnce(&[f64]) -> Vec<f64>,
) -> f64 {
    let g = grad(theta);
    assert_eq!(g.len(), theta.len());
    let mut worst = 0.0f64;
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = FD_STEP * theta[i].abs().max(1.0);
        probe[i] = theta[i] + h;
        let up = value(&probe);
        probe[i] = theta[i] - h;
        let down = value(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(g[i], fd));
    }
    worst
}

/// One gradient-check case: named input shapes plus a graph builder that
/// returns the tensor to reduce. The harness reduces it with a fixed random
/// weighting so every output element contributes to the scalar.
struct Case {
    shapes: Vec<(usize, usize)>,
    data: Vec<f64>,
    weights: Vec<f64>,
    build: Box<dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>>,
}

impl Case {
    fn split(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for &(r, c) in &self.shapes {
            out.push(theta[off..off + r * c].to_vec());
            off += r * c;
        }
        out
    }

    fn run(&self, theta: &[f64], backward: bool) -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let parts = self.split(theta);
        let ids: Vec<TensorId> = parts
            .into_iter()
            .zip(&self.shapes)
            .map(|(data, &(r, c))| tape.input(r, c, data))
            .collect();
        let out = (self.build)(&mut tape, &ids).expect("gradcheck graph must build");
        let (r, c) = tape.shape(out);
        assert_eq!(r * c, self.weights.len(), "weight shape mismatch");
        let w = tape.constant(r, c, self.weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        let value = tape.scalar(loss);
        if !backward {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let grads = ids.iter().flat_map(|&id| tape.grad(id).to_vec()).collect();
        (value, grads)
    }

    fn max_rel_err(&self) -> f64 {
        check_fn(
            &self.data.clone(),
            |theta| self.run(theta, false).0,
            |theta| self.run(theta, true).1,
        )
    }
}

fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rngutil::uniform(rng, -2.0, 2.0)).collect()
}

/// Values bounded away from zero, for divisors and abs inputs.
fn randvec_away_from(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 };
            sign * rngutil::uniform(rng, margin, 2.0)
        })
        .collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let r = 1 + (rng.next_u64() % 4) as usize;
    let c = 1 + (rng.next_u64() % 5) as usize;
    (r, c)
}

use rand::RngCore;

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = dims(rng);
    match name {
        "matmul" => {
            let k = 1 + (rng.next_u64() % 4) as usize;
            let shapes = vec![(m, k), (k, n)];
            let data = randvec(rng, m * k + k * n);
            Case {
                shapes,
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| t.matmul(ids[0], ids[1])),
            }
        }
        "matmul_transb" => {
            let k = 1 + (rng.next_u64() % 4) as usize;
            let shapes = vec![(m, k), (n, k)];
            let data = randvec(rng, m * k + n * k);
            Case {
                shapes,
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| t.matmul_transb(ids[0], ids[1])),
            }
        }
        "add" | "sub" | "mul" => {
            let shapes = vec![(m, n), (m, n)];
            let data = randvec(rng, 2 * m * n);
            let op = name.to_string();
            Case {
                shapes,
                data,
                weights: randvec(rng, m * n),
                build: Box::new(move |t, ids| match op.as_str() {
                    "add" => t.add(ids[0], ids[1]),
                    "sub" => t.sub(ids[0], ids[1]),
                    _ => t.mul(ids[0], ids[1]),
                }),
            }
        }
        "div" => {
            let mut data = randvec(rng, m * n);
            data.extend(randvec_away_from(rng, m * n, 0.3));
            Case {
                shapes: vec![(m, n), (m, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| t.div(ids[0], ids[1])),
            }
        }
        "scale" => {
            let c = rngutil::uniform(rng, -2.0, 2.0);
            Case {
                shapes: vec![(m, n)],
                data: randvec(rng, m * n),
                weights: randvec(rng, m * n),
                build: Box::new(move |t, ids| Ok(t.scale(ids[0], c))),
            }
        }
        "add_row" | "mul_row" => {
            let mut data = randvec(rng, m * n);
            data.extend(randvec(rng, n));
            let op = name.to_string();
            Case {
                shapes: vec![(m, n), (1, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(move |t, ids| {
                    if op == "add_row" {
                        t.add_row(ids[0], ids[1])
                    } else {
                        t.mul_row(ids[0], ids[1])
                    }
                }),
            }
        }
        "gelu" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, m * n),
            build: Box::new(|t, ids| Ok(t.gelu(ids[0]))),
        },
        "sigmoid" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, m * n),
            build: Box::new(|t, ids| Ok(t.sigmoid(ids[0]))),
        },
        "normalize_rows" => {
            let n = n.max(2);
            // Give every row spread so the variance stays well away from 0.
            let data: Vec<f64> = (0..m * n)
                .map(|i| rngutil::uniform(rng, -1.5, 1.5) + (i % n) as f64 * 0.8)
                .collect();
            Case {
                shapes: vec![(m, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| Ok(t.normalize_rows(ids[0], 1e-5))),
            }
        }
        "layer_norm" => {
            let n = n.max(2);
            let mut data: Vec<f64> = (0..m * n)
                .map(|i| rngutil::uniform(rng, -1.5, 1.5) + (i % n) as f64 * 0.8)
                .collect();
            data.extend(randvec(rng, n)); // gain
            data.extend(randvec(rng, n)); // shift
            Case {
                shapes: vec![(m, n), (1, n), (1, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| t.layer_norm_affine(ids[0], ids[1], ids[2], 1e-5)),
            }
        }
        "softmax_rows" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, m * n),
            build: Box::new(|t, ids| Ok(t.softmax_rows(ids[0]))),
        },
        "log_sum_exp_rows" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, m),
            build: Box::new(|t, ids| Ok(t.log_sum_exp_rows(ids[0]))),
        },
        "sum_all" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, 1),
            build: Box::new(|t, ids| Ok(t.sum_all(ids[0]))),
        },
        "mean_over_rows" => Case {
            shapes: vec![(m, n)],
            data: randvec(rng, m * n),
            weights: randvec(rng, n),
            build: Box::new(|t, ids| t.mean_over_rows(ids[0])),
        },
        "abs" => Case {
            shapes: vec![(m, n)],
            data: randvec_away_from(rng, m * n, 0.05),
            weights: randvec(rng, m * n),
            build: Box::new(|t, ids| Ok(t.abs(ids[0]))),
        },
        "min" | "max" => {
            // Keep the two operands separated so the winner is stable under
            // the finite-difference step.
            let a = randvec(rng, m * n);
            let b: Vec<f64> = a
                .iter()
                .map(|&x| {
                    let gap = rngutil::uniform(rng, 0.05, 1.0);
                    if rng.next_u64() % 2 == 0 {
                        x + gap
                    } else {
                        x - gap
                    }
                })
                .collect();
            let mut data = a;
            data.extend(b);
            let op = name.to_string();
            Case {
                shapes: vec![(m, n), (m, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(move |t, ids| {
                    if op == "min" {
                        t.min(ids[0], ids[1])
                    } else {
                        t.max(ids[0], ids[1])
                    }
                }),
            }
        }
        "clamp" => {
            let data: Vec<f64> = (0..m * n)
                .map(|_| {
                    // Inside (-1, 1) or clearly outside; never near the rim.
                    match rng.next_u64() % 3 {
                        0 => rngutil::uniform(rng, -0.9, 0.9),
                        1 => rngutil::uniform(rng, 1.1, 2.0),
                        _ => rngutil::uniform(rng, -2.0, -1.1),
                    }
                })
                .collect();
            Case {
                shapes: vec![(m, n)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| Ok(t.clamp(ids[0], -1.0, 1.0))),
            }
        }
        "select" => {
            let k = 1 + (rng.next_u64() % 6) as usize;
            let idx: Vec<usize> = (0..k).map(|_| (rng.next_u64() as usize) % (m * n)).collect();
            Case {
                shapes: vec![(m, n)],
                data: randvec(rng, m * n),
                weights: randvec(rng, k),
                build: Box::new(move |t, ids| t.select(ids[0], idx.clone())),
            }
        }
        "concat_rows" => {
            let m2 = 1 + (rng.next_u64() % 3) as usize;
            let mut data = randvec(rng, m * n);
            data.extend(randvec(rng, m2 * n));
            Case {
                shapes: vec![(m, n), (m2, n)],
                data,
                weights: randvec(rng, (m + m2) * n),
                build: Box::new(|t, ids| t.concat_rows(&[ids[0], ids[1]])),
            }
        }
        "slice_rows" => {
            let m = m.max(2);
            let r0 = (rng.next_u64() as usize) % (m - 1);
            let r1 = r0 + 1 + (rng.next_u64() as usize) % (m - r0 - 1).max(1);
            let rows = r1 - r0;
            Case {
                shapes: vec![(m, n)],
                data: randvec(rng, m * n),
                weights: randvec(rng, rows * n),
                build: Box::new(move |t, ids| t.slice_rows(ids[0], r0, r1)),
            }
        }
        "concat_cols" => {
            let n2 = 1 + (rng.next_u64() % 3) as usize;
            let mut data = randvec(rng, m * n);
            data.extend(randvec(rng, m * n2));
            Case {
                shapes: vec![(m, n), (m, n2)],
                data,
                weights: randvec(rng, m * (n + n2)),
                build: Box::new(|t, ids| t.concat_cols(&[ids[0], ids[1]])),
            }
        }
        "slice_cols" => {
            let n = n.max(2);
            let c0 = (rng.next_u64() as usize) % (n - 1);
            let c1 = c0 + 1 + (rng.next_u64() as usize) % (n - c0 - 1).max(1);
            let cols = c1 - c0;
            Case {
                shapes: vec![(m, n)],
                data: randvec(rng, m * n),
                weights: randvec(rng, m * cols),
                build: Box::new(move |t, ids| t.slice_cols(ids[0], c0, c1)),
            }
        }
        "cosine_matrix" => {
            let d = 2 + (rng.next_u64() % 4) as usize;
            // Rows rescaled to healthy norms.
            let make = |rng: &mut ChaCha8Rng, rows: usize| -> Vec<f64> {
                let mut v = randvec(rng, rows * d);
                for r in 0..rows {
                    let row = &mut v[r * d..(r + 1) * d];
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
                    let target = rngutil::uniform(rng, 0.5, 2.0);
                    row.iter_mut().for_each(|x| *x *= target / norm);
                }
                v
            };
            let mut data = make(rng, m);
            data.extend(make(rng, n));
            Case {
                shapes: vec![(m, d), (n, d)],
                data,
                weights: randvec(rng, m * n),
                build: Box::new(|t, ids| t.cosine_matrix(ids[0], ids[1])),
            }
        }
        "info_nce" => {
            let k = 2 + (rng.next_u64() % 6) as usize;
            Case {
                shapes: vec![(1, k)],
                data: randvec(rng, k),
                weights: vec![1.0],
                build: Box::new(move |t, ids| {
                    let negs: Vec<usize> = (1..k).collect();
                    tloss::info_nce_on_tape(t, ids[0], 0, &negs, 0.3)
                }),
            }
        }
        "span_losses" => {
            // Proper intervals kept away from ties and touching boundaries.
            let ps = rngutil::uniform(rng, 0.05, 0.5);
            let pe = ps + rngutil::uniform(rng, 0.08, 0.4);
            let mut gs = rngutil::uniform(rng, 0.05, 0.5);
            let mut ge = gs + rngutil::uniform(rng, 0.08, 0.4);
            // Avoid exact kink alignments between pred and gt endpoints.
            for (p, g) in [(ps, &mut gs), (pe, &mut ge)] {
                if (p - *g).abs() < 0.03 {
                    *g += 0.05;
                }
            }
            let (gs, ge) = (gs, ge);
            Case {
                shapes: vec![(1, 2)],
                data: vec![ps, pe],
                weights: vec![1.0],
                build: Box::new(move |t, ids| {
                    let l1 = tloss::l1_span_loss(t, ids[0], 0, (gs, ge))?;
                    let gl = tloss::giou_span_loss(t, ids[0], 0, (gs, ge))?;
                    t.add(l1, gl)
                }),
            }
        }
        other => panic!("unknown gradcheck op {other}"),
    }
}

const PRIMITIVE_OPS: &[&str] = &[
    "matmul",
    "matmul_transb",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_row",
    "mul_row",
    "gelu",
    "sigmoid",
    "normalize_rows",
    "layer_norm",
    "softmax_rows",
    "log_sum_exp_rows",
    "sum_all",
    "mean_over_rows",
    "abs",
    "min",
    "max",
    "clamp",
    "select",
    "concat_rows",
    "slice_rows",
    "concat_cols",
    "slice_cols",
    "cosine_matrix",
    "info_nce",
    "span_losses",
];

fn store_template(kind: &str, cfg: &BlockConfig, seed: u64) -> ParamStore<f64> {
    let mut rng = rngutil::rng_for(seed, 40);
    let mut store = ParamStore::<f64>::new();
    match kind {
        "linear" => blocks::init_linear(&mut store, "lin", 3, 2, &mut rng),
        "transformer_encode" => blocks::init_encoder(&mut store, "enc", cfg, &mut rng),
        "transformer_decode" => blocks::init_decoder(&mut store, "dec", cfg, &mut rng),
        _ => unreachable!(),
    }
    store
}

fn store_to_vec(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.data.clone()).collect()
}

fn store_from_vec(template: &ParamStore<f64>, theta: &[f64]) -> ParamStore<f64> {
    let mut out = template.clone();
    let mut off = 0;
    let names: Vec<String> = template.names().map(String::from).collect();
    for name in names {
        let len = template.get(&name).unwrap().data.len();
        out.set_data(&name, theta[off..off + len].to_vec()).unwrap();
        off += len;
    }
    debug_assert_eq!(off, theta.len());
    out
}

/// Gradcheck for the parameterized blocks: tokens plus every parameter are
/// perturbed together.
fn block_case(kind: &str, rng: &mut ChaCha8Rng, seed: u64) -> f64 {
    let cfg = BlockConfig { d_model: 8, n_heads: 2, ffn_mult: 2, layers: 1, dropout: 0.0 };
    let template = store_template(kind, &cfg, seed);

    let (t_q, t_mem) = match kind {
        "transformer_decode" => (2usize, 3usize), // the 2-query, 3-token case
        _ => (1 + (rng.next_u64() % 3) as usize, 0usize),
    };
    let token_dim = if kind == "linear" { 3 } else { cfg.d_model };
    let mut theta = randvec(rng, t_q * token_dim);
    theta.extend(randvec(rng, t_mem * cfg.d_model));
    theta.extend(store_to_vec(&template));
    let out_cols = if kind == "linear" { 2 } else { cfg.d_model };
    let weights = randvec(rng, t_q * out_cols);

    let kind = kind.to_string();
    let run = |theta: &[f64], backward: bool| -> (f64, Vec<f64>) {
        let tok_len = t_q * token_dim;
        let mem_len = t_mem * cfg.d_model;
        let mut store = store_from_vec(&template, &theta[tok_len + mem_len..]);
        store.zero_grads();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t_q, token_dim, theta[..tok_len].to_vec());
        let mem = (mem_len > 0)
            .then(|| tape.input(t_mem, cfg.d_model, theta[tok_len..tok_len + mem_len].to_vec()));
        let out = match kind.as_str() {
            "linear" => blocks::linear(&mut tape, &store, x, "lin").unwrap(),
            "transformer_encode" => {
                blocks::transformer_encode(&mut tape, &store, "enc", x, &cfg, &mut Dropout::off())
                    .unwrap()
            }
            _ => blocks::transformer_decode(
                &mut tape,
                &store,
                "dec",
                x,
                mem.unwrap(),
                &cfg,
                &mut Dropout::off(),
            )
            .unwrap(),
        };
        let w = tape.constant(t_q, out_cols, weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        let value = tape.scalar(loss);
        if !backward {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        let mut grads = Vec::with_capacity(theta.len());
        grads.extend(tape.grad(x).to_vec());
        if let Some(mem) = mem {
            grads.extend(tape.grad(mem).to_vec());
        }
        grads.extend(store_to_vec_grads(&store));
        (value, grads)
    };

    check_fn(&theta.clone(), |t| run(t, false).0, |t| run(t, true).1)
}

fn store_to_vec_grads(store: &ParamStore<f64>) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.grad.clone()).collect()
}

/// Run the whole suite: `instances` random cases per operation.
pub fn run_all(instances: usize, seed: u64) -> Vec<OpReport> {
    let mut reports = Vec::new();
    for &name in PRIMITIVE_OPS {
        let mut rng = rngutil::rng_for(seed, 50 + name.len() as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let case = primitive_case(name, &mut rng);
            worst = worst.max(case.max_rel_err());
        }
        reports.push(OpReport { name: name.to_string(), max_rel_err: worst, instances });
    }
    // Parameterized blocks get fewer, heavier instances: full parameter
    // sweeps make each one cost hundreds of forwards.
    let block_instances = (instances / 10).max(3);
    for kind in ["linear", "transformer_encode", "transformer_decode"] {
        let mut rng = rngutil::rng_for(seed, 60 + kind.len() as u64);
        let mut worst = 0.0f64;
        let n = if kind == "linear" { instances } else { block_instances };
        for i in 0..n {
            worst = worst.max(block_case(kind, &mut rng, seed.wrapping_add(i as u64)));
        }
        reports.push(OpReport { name: kind.to_string(), max_rel_err: worst, instances: n });
    }
    reports
}
