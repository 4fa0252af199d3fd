//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar from the given input handles.
pub type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
    pub failure: Option<String>,
}

/// Compares the analytic gradient of `f` at `inputs` with central differences.
pub fn grad_check(
    name: &str,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.epsilon > 0.0 && opts.epsilon <= 1e-2) {
        return Err(Error::contract(format!(
            "epsilon must lie in (0, 1e-2], got {}",
            opts.epsilon
        )));
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::contract(format!("input {i} has non-finite values")));
        }
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract("grad_check needs a scalar-valued function"));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
        failure: None,
    };
    for (i, g) in analytic.iter().enumerate() {
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            report.passed = false;
            report.worst = Some((i, j));
            report.failure = Some(format!("non-finite analytic gradient at input {i}, element {j}"));
            return Ok(report);
        }
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.input(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.epsilon;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.epsilon;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let a = analytic[i][j];
            report.checked += 1;
            if !numeric.is_finite() {
                report.passed = false;
                report.worst = Some((i, j));
                report.failure = Some(format!("non-finite numeric gradient at input {i}, element {j}"));
                return Ok(report);
            }
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let err = (a - numeric).abs() / denom;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    if !report.passed {
        let (i, j) = report.worst.unwrap_or((0, 0));
        report.failure = Some(format!(
            "relative error {:.3e} exceeds {:.1e} at input {i}, element {j}",
            report.max_rel_error, opts.tolerance
        ));
    }
    Ok(report)
}

/// A named function with sampled inputs, ready for [`grad_check`].
pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: CheckFn,
}

impl GradCheckCase {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        grad_check(&self.name, &*self.f, &self.inputs, opts)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// Reduces any tensor to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.value(x).shape().to_vec();
    let w = randn(&mut rng, shape);
    let w = tape.constant(w);
    let m = tape.mul(x, w)?;
    Ok(tape.sum(m))
}

fn case(name: String, inputs: Vec<Tensor>, f: CheckFn) -> GradCheckCase {
    GradCheckCase { name, inputs, f }
}

/// One case per differentiable tape operation and per shape variant.
pub fn op_suite(seed: u64, variants: usize) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for v in 0..variants {
        let tag = |op: &str| format!("{op}#{v}");
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..6);
        let n = rng.random_range(1..5);
        let ps = seed.wrapping_add(v as u64);

        cases.push(case(
            tag("matmul"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![k, n])],
            Box::new(move |t, x| {
                let y = t.matmul(x[0], x[1])?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("matmul_nt"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![n, k])],
            Box::new(move |t, x| {
                let y = t.matmul_nt(x[0], x[1])?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("add"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.add(x[0], x[1])?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("mul"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.mul(x[0], x[1])?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("add_row"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![k])],
            Box::new(move |t, x| {
                let y = t.add_row(x[0], x[1])?;
                project(t, y, ps)
            }),
        ));
        let (seqs, len) = (rng.random_range(1..4), rng.random_range(1..5));
        cases.push(case(
            tag("add_positions"),
            vec![
                randn(&mut rng, vec![seqs * len, k]),
                randn(&mut rng, vec![len + 2, k]),
            ],
            Box::new(move |t, x| {
                let y = t.add_positions(x[0], x[1], seqs, len)?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("scale"),
            vec![randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.scale(x[0], -1.7);
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("gelu"),
            vec![randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.gelu(x[0]);
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("tanh"),
            vec![randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.tanh(x[0]);
                project(t, y, ps)
            }),
        ));
        let width = rng.random_range(2..9);
        cases.push(case(
            tag("layer_norm"),
            vec![
                randn(&mut rng, vec![m, width]),
                randn(&mut rng, vec![width]),
                randn(&mut rng, vec![width]),
            ],
            Box::new(move |t, x| {
                let y = t.layer_norm(x[0], x[1], x[2], 1e-5)?;
                project(t, y, ps)
            }),
        ));
        let vocab = rng.random_range(2..7);
        let ids: Vec<usize> = (0..rng.random_range(1..6))
            .map(|_| rng.random_range(0..vocab))
            .collect();
        cases.push(case(
            tag("embedding"),
            vec![randn(&mut rng, vec![vocab, k])],
            Box::new(move |t, x| {
                let y = t.embedding(x[0], &ids)?;
                project(t, y, ps)
            }),
        ));
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        for causal in [true, false] {
            cases.push(case(
                tag(if causal { "attention_causal" } else { "attention" }),
                vec![
                    randn(&mut rng, vec![seqs * len, d]),
                    randn(&mut rng, vec![seqs * len, d]),
                    randn(&mut rng, vec![seqs * len, d]),
                ],
                Box::new(move |t, x| {
                    let y = t.attention(x[0], x[1], x[2], seqs, len, heads, causal)?;
                    project(t, y, ps)
                }),
            ));
        }
        let len2 = rng.random_range(1..4);
        cases.push(case(
            tag("concat_seq"),
            vec![
                randn(&mut rng, vec![seqs * len, k]),
                randn(&mut rng, vec![seqs * len2, k]),
            ],
            Box::new(move |t, x| {
                let y = t.concat_seq(&[(x[0], len), (x[1], len2)], seqs)?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("concat_rows"),
            vec![randn(&mut rng, vec![m, k]), randn(&mut rng, vec![n, k])],
            Box::new(move |t, x| {
                let y = t.concat_rows(&[x[0], x[1]])?;
                project(t, y, ps)
            }),
        ));
        let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..m)).collect();
        cases.push(case(
            tag("select_rows"),
            vec![randn(&mut rng, vec![m, k])],
            Box::new(move |t, x| {
                let y = t.select_rows(x[0], &idx)?;
                project(t, y, ps)
            }),
        ));
        let out_len = rng.random_range(1..5);
        cases.push(case(
            tag("seq_mix"),
            vec![
                randn(&mut rng, vec![out_len, len]),
                randn(&mut rng, vec![seqs * len, k]),
            ],
            Box::new(move |t, x| {
                let y = t.seq_mix(x[0], x[1], seqs)?;
                project(t, y, ps)
            }),
        ));
        cases.push(case(
            tag("l2_normalize"),
            vec![randn(&mut rng, vec![m, k + 1])],
            Box::new(move |t, x| {
                let y = t.l2_normalize(x[0])?;
                project(t, y, ps)
            }),
        ));
        let b = rng.random_range(1..5);
        let dim = rng.random_range(2..6);
        cases.push(case(
            tag("info_nce"),
            vec![randn(&mut rng, vec![b, dim]), randn(&mut rng, vec![b, dim])],
            Box::new(move |t, x| {
                let q = t.l2_normalize(x[0])?;
                let c = t.l2_normalize(x[1])?;
                t.info_nce(q, c, 0.5)
            }),
        ));
        let classes = rng.random_range(2..9);
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let target = Tensor::vector(raw.iter().map(|v| v / total).collect());
        cases.push(case(
            tag("softmax_cross_entropy"),
            vec![randn(&mut rng, vec![classes])],
            Box::new(move |t, x| {
                let target = t.constant(target.clone());
                t.softmax_cross_entropy(x[0], target)
            }),
        ));
        cases.push(case(
            tag("row_cross_entropy"),
            vec![randn(&mut rng, vec![b, dim]), randn(&mut rng, vec![b, dim])],
            Box::new(move |t, x| t.row_cross_entropy(x[0], x[1], 0.7, false)),
        ));
        // With the target branch stopped only e′ is differentiated.
        let teacher = randn(&mut rng, vec![b, dim]);
        cases.push(case(
            tag("row_cross_entropy_stopgrad"),
            vec![randn(&mut rng, vec![b, dim])],
            Box::new(move |t, x| {
                let e = t.constant(teacher.clone());
                t.row_cross_entropy(e, x[0], 0.7, true)
            }),
        ));
        cases.push(case(
            tag("row_mse"),
            vec![randn(&mut rng, vec![b, dim]), randn(&mut rng, vec![b, dim])],
            Box::new(move |t, x| t.row_mse(x[0], x[1], false)),
        ));
        cases.push(case(
            tag("row_cosine_distance"),
            vec![randn(&mut rng, vec![b, dim]), randn(&mut rng, vec![b, dim])],
            Box::new(move |t, x| t.row_cosine_distance(x[0], x[1], false)),
        ));
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_passes_on_three_shapes() {
        let opts = GradCheckOptions::default();
        for seed in [1, 2, 3] {
            for c in op_suite(seed, 3) {
                let r = c.run(&opts).unwrap();
                assert!(r.passed, "{}: {:?}", c.name, r.failure);
            }
        }
    }

    #[test]
    fn matmul_three_by_four_times_four_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![randn(&mut rng, vec![3, 4]), randn(&mut rng, vec![4, 2])];
        let f = |t: &mut Tape, x: &[Var]| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, 5)
        };
        let r = grad_check("matmul", &f, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn layer_norm_on_eight_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            randn(&mut rng, vec![1, 8]),
            randn(&mut rng, vec![8]),
            randn(&mut rng, vec![8]),
        ];
        let f = |t: &mut Tape, x: &[Var]| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-5)?;
            project(t, y, 8)
        };
        let r = grad_check("layer_norm", &f, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "{:?}", r.failure);
    }

    #[test]
    fn sign_flipped_backward_is_reported() {
        let inputs = vec![Tensor::vector(vec![0.3, -1.2, 2.0])];
        let f = |t: &mut Tape, x: &[Var]| {
            let value = t.value(x[0]).clone();
            let squared = Tensor::vector(value.data().iter().map(|v| v * v).collect());
            let y = t.custom(
                &[x[0]],
                squared,
                Box::new(|vals, g| {
                    vec![vals[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, gv)| -2.0 * v * gv)
                        .collect()]
                }),
            );
            Ok(t.sum(y))
        };
        let r = grad_check("flipped", &f, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("exceeds"));
    }

    #[test]
    fn rejects_bad_epsilon_and_non_finite_inputs() {
        let f = |t: &mut Tape, x: &[Var]| Ok(t.sum(x[0]));
        let opts = GradCheckOptions {
            epsilon: 0.5,
            ..Default::default()
        };
        assert!(grad_check("e", &f, &[Tensor::vector(vec![1.0])], &opts).is_err());
        let opts = GradCheckOptions::default();
        assert!(grad_check("n", &f, &[Tensor::vector(vec![f64::NAN])], &opts).is_err());
    }

    #[test]
    fn non_finite_analytic_gradient_names_index() {
        let f = |t: &mut Tape, x: &[Var]| {
            let v = t.value(x[0]).clone();
            let y = t.custom(
                &[x[0]],
                v,
                Box::new(|_, g| vec![vec![g[0], f64::INFINITY]]),
            );
            Ok(t.sum(y))
        };
        let r = grad_check(
            "inf",
            &f,
            &[Tensor::vector(vec![1.0, 2.0])],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, Some((0, 1)));
    }
}
