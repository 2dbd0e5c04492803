//! The registry of gradient checks: every differentiable operation plus the
//! composite reasoning, projection and end-to-end pipeline programs, each
//! verified against central finite differences over multiple random shapes.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipeline::{
    build_forward, InputVars, ParamVars, PipelineConfig, PipelineMode, PipelineParams,
};
use crate::reasoning::attention_adjacency_on_tape;
use crate::tensor::gradcheck::random_away_from_zero;
use crate::tensor::{
    grad_check, Axis, CorruptedBackward, DiffOp, GradCheckReport, Mask, Mat, TapeProgram,
};

type InputGen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Mat>>;

struct SuiteEntry {
    name: &'static str,
    trials: usize,
    make_inputs: InputGen,
    op: Box<dyn DiffOp>,
}

fn uni(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::random_uniform(rows, cols, -1.5, 1.5, r)
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// The 3-thing/2-stuff pipeline instance used by the end-to-end check.
pub fn e2e_config() -> PipelineConfig {
    PipelineConfig {
        n_dim: 6,
        d0: 4,
        d1: 4,
        d2: 4,
        t_layers: 2,
        heads: 3,
        thing_classes: 2,
        stuff_classes: 2,
        mode: PipelineMode::Bidirectional,
        leaky_slope: 0.2,
    }
}

/// The 3-proposal, 4-stuff-class, 6×6 variant the projection contract pins.
pub fn e2e_config_4stuff() -> PipelineConfig {
    PipelineConfig {
        stuff_classes: 4,
        ..e2e_config()
    }
}

const E2E_HEIGHT: usize = 6;
const E2E_WIDTH: usize = 6;
const E2E_THINGS: usize = 3;

fn e2e_inputs(cfg: &PipelineConfig, r: &mut ChaCha8Rng) -> Vec<Mat> {
    let hw = E2E_HEIGHT * E2E_WIDTH;
    let mut inputs = vec![
        uni(r, E2E_THINGS, cfg.n_dim),
        uni(r, cfg.n_dim, hw),
        uni(r, hw, cfg.stuff_classes),
    ];
    let mut rng_params = ChaCha8Rng::seed_from_u64(r.random());
    let params = PipelineParams::random_init(cfg, &mut rng_params).expect("valid config");
    inputs.extend(params.named().into_iter().map(|(_, m)| m.clone()));
    inputs
}

/// End-to-end program: forward pass, then the scalar
/// `sum(thing logits) + sum(refined stuff logits)`.
fn e2e_program(
    name: &'static str,
    cfg: PipelineConfig,
) -> TapeProgram<
    impl Fn(&mut crate::tensor::Tape, &[crate::tensor::Var]) -> Result<crate::tensor::Var>,
> {
    TapeProgram::new(name, move |tape, vars| {
        let inputs = InputVars {
            thing_features: vars[0],
            features: vars[1],
            scores: vars[2],
        };
        let params = ParamVars::from_ordered(&cfg, &vars[3..])?;
        let out = build_forward(tape, &cfg, inputs, &params, None)?;
        let s_things = tape.sum_all(out.thing_logits);
        let s_stuff = tape.sum_all(out.refined_logits);
        tape.add(s_things, s_stuff)
    })
}

fn entries() -> Vec<SuiteEntry> {
    let mut list: Vec<SuiteEntry> = Vec::new();

    list.push(SuiteEntry {
        name: "matmul",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, k), uni(r, k, n)]
        }),
        op: Box::new(TapeProgram::new("matmul", |t, v| t.matmul(v[0], v[1]))),
    });

    list.push(SuiteEntry {
        name: "transpose",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("transpose", |t, v| Ok(t.transpose(v[0])))),
    });

    list.push(SuiteEntry {
        name: "scale_add",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n), uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("scale_add", |t, v| {
            t.scale_add(v[0], v[1], 2.0, -0.7)
        })),
    });

    list.push(SuiteEntry {
        name: "concat_cols",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, a, b) = (dims(r, 1, 5), dims(r, 1, 4), dims(r, 1, 4));
            vec![uni(r, m, a), uni(r, m, b)]
        }),
        op: Box::new(TapeProgram::new("concat_cols", |t, v| {
            t.concat_cols(v[0], v[1])
        })),
    });

    list.push(SuiteEntry {
        name: "concat_rows",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (n, a, b) = (dims(r, 1, 5), dims(r, 1, 4), dims(r, 1, 4));
            vec![uni(r, a, n), uni(r, b, n)]
        }),
        op: Box::new(TapeProgram::new("concat_rows", |t, v| {
            t.concat_rows(v[0], v[1])
        })),
    });

    list.push(SuiteEntry {
        name: "slice_cols",
        trials: 10,
        make_inputs: Box::new(|r| {
            let m = dims(r, 1, 5);
            vec![uni(r, m, 6)]
        }),
        op: Box::new(TapeProgram::new("slice_cols", |t, v| t.slice_cols(v[0], 1, 4))),
    });

    list.push(SuiteEntry {
        name: "slice_rows",
        trials: 10,
        make_inputs: Box::new(|r| {
            let n = dims(r, 1, 5);
            vec![uni(r, 6, n)]
        }),
        op: Box::new(TapeProgram::new("slice_rows", |t, v| t.slice_rows(v[0], 2, 5))),
    });

    list.push(SuiteEntry {
        name: "relu",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![random_away_from_zero(m, n, r)]
        }),
        op: Box::new(TapeProgram::new("relu", |t, v| Ok(t.relu(v[0])))),
    });

    list.push(SuiteEntry {
        name: "leaky_relu",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![random_away_from_zero(m, n, r)]
        }),
        op: Box::new(TapeProgram::new("leaky_relu", |t, v| t.leaky_relu(v[0], 0.2))),
    });

    list.push(SuiteEntry {
        name: "softmax_rows",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("softmax_rows", |t, v| {
            Ok(t.softmax_axis(v[0], Axis::Rows))
        })),
    });

    list.push(SuiteEntry {
        name: "softmax_cols",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("softmax_cols", |t, v| {
            Ok(t.softmax_axis(v[0], Axis::Cols))
        })),
    });

    list.push(SuiteEntry {
        name: "masked_softmax_rows",
        trials: 10,
        make_inputs: Box::new(|r| vec![uni(r, 5, 5)]),
        op: Box::new(TapeProgram::new("masked_softmax_rows", |t, v| {
            let mut mask = Mask::all_allowed(5, 5);
            mask.forbid_block(0..2, 3..5);
            mask.forbid_block(3..5, 0..2);
            t.masked_softmax_rows(v[0], Rc::new(mask))
        })),
    });

    list.push(SuiteEntry {
        name: "log_softmax_rows",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("log_softmax_rows", |t, v| {
            Ok(t.log_softmax_rows(v[0]))
        })),
    });

    list.push(SuiteEntry {
        name: "mul_elem",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n), uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("mul_elem", |t, v| t.mul_elem(v[0], v[1]))),
    });

    list.push(SuiteEntry {
        name: "sum_all",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (m, n) = (dims(r, 1, 5), dims(r, 1, 5));
            vec![uni(r, m, n)]
        }),
        op: Box::new(TapeProgram::new("sum_all", |t, v| Ok(t.sum_all(v[0])))),
    });

    list.push(SuiteEntry {
        name: "class_centers",
        trials: 10,
        make_inputs: Box::new(|r| {
            let (n, hw, c) = (dims(r, 2, 5), dims(r, 4, 9), dims(r, 1, 4));
            vec![uni(r, n, hw), uni(r, hw, c)]
        }),
        op: Box::new(TapeProgram::new("class_centers", |t, v| {
            crate::graphs::class_centers_on_tape(t, v[0], v[1])
        })),
    });

    list.push(SuiteEntry {
        name: "attention_adjacency",
        trials: 5,
        make_inputs: Box::new(|r| {
            let d = 4;
            vec![
                uni(r, 5, d),
                uni(r, 1, 2 * d),
                uni(r, 1, 2 * d),
                uni(r, 1, 2 * d),
            ]
        }),
        op: Box::new(TapeProgram::new("attention_adjacency", |t, v| {
            let mask = crate::reasoning::direction_mask(
                crate::reasoning::DirectionMode::Bidirectional,
                3,
                2,
            );
            attention_adjacency_on_tape(t, v[0], &v[1..4], Rc::new(mask), 0.2)
        })),
    });

    list.push(SuiteEntry {
        name: "reasoning_layer",
        trials: 3,
        make_inputs: Box::new(|r| {
            let d = 4;
            vec![
                uni(r, 3, d),
                uni(r, 2, d),
                uni(r, d, 3),
                uni(r, d, 3),
                uni(r, 1, 2 * d),
                uni(r, 1, 2 * d),
                uni(r, 1, 2 * d),
            ]
        }),
        op: Box::new(TapeProgram::new("reasoning_layer", |t, v| {
            let layer = crate::reasoning::LayerVars {
                w_th: v[2],
                w_st: v[3],
                heads: v[4..7].to_vec(),
            };
            let out = crate::reasoning::run_reasoning_on_tape(
                t,
                v[0],
                v[1],
                &[layer],
                crate::reasoning::DirectionMode::Bidirectional,
                0.2,
                None,
            )?;
            t.concat_rows(out.x_th, out.x_st)
        })),
    });

    list.push(SuiteEntry {
        name: "run_reasoning",
        trials: 2,
        make_inputs: Box::new(|r| {
            let d = 4;
            let d0 = 3;
            let mut v = vec![uni(r, 3, d), uni(r, 2, d)];
            // Layer 1 over width d, layer 2 over width d + d0.
            for d_in in [d, d + d0] {
                v.push(uni(r, d_in, d0));
                v.push(uni(r, d_in, d0));
                for _ in 0..3 {
                    v.push(uni(r, 1, 2 * d_in));
                }
            }
            v
        }),
        op: Box::new(TapeProgram::new("run_reasoning", |t, v| {
            let layers = vec![
                crate::reasoning::LayerVars {
                    w_th: v[2],
                    w_st: v[3],
                    heads: v[4..7].to_vec(),
                },
                crate::reasoning::LayerVars {
                    w_th: v[7],
                    w_st: v[8],
                    heads: v[9..12].to_vec(),
                },
            ];
            let out = crate::reasoning::run_reasoning_on_tape(
                t,
                v[0],
                v[1],
                &layers,
                crate::reasoning::DirectionMode::Bidirectional,
                0.2,
                None,
            )?;
            let cat = t.concat_rows(out.x_th, out.x_st)?;
            // Fold the attention block in so its gradients are covered too.
            let s1 = t.sum_all(cat);
            let s2 = t.sum_all(out.a_th_final);
            t.add(s1, s2)
        })),
    });

    list.push(SuiteEntry {
        name: "project_things",
        trials: 5,
        make_inputs: Box::new(|r| vec![uni(r, 3, 6), uni(r, 3, 3), uni(r, 6, 4)]),
        op: Box::new(TapeProgram::new("project_things", |t, v| {
            crate::projection::project_things_on_tape(t, v[0], v[1], v[2])
        })),
    });

    list.push(SuiteEntry {
        name: "classify_regions",
        trials: 5,
        make_inputs: Box::new(|r| vec![uni(r, 3, 4), uni(r, 3, 2), uni(r, 6, 3), uni(r, 1, 3)]),
        op: Box::new(TapeProgram::new("classify_regions", |t, v| {
            crate::projection::classify_regions_on_tape(t, v[0], v[1], v[2], v[3])
        })),
    });

    list.push(SuiteEntry {
        name: "project_stuff",
        trials: 5,
        make_inputs: Box::new(|r| vec![uni(r, 9, 3), uni(r, 3, 6), uni(r, 6, 4)]),
        op: Box::new(TapeProgram::new("project_stuff", |t, v| {
            crate::projection::project_stuff_on_tape(t, v[0], v[1], v[2])
        })),
    });

    list.push(SuiteEntry {
        name: "segment_pixels",
        trials: 5,
        make_inputs: Box::new(|r| vec![uni(r, 9, 4), uni(r, 9, 2), uni(r, 6, 3), uni(r, 1, 3)]),
        op: Box::new(TapeProgram::new("segment_pixels", |t, v| {
            crate::projection::segment_pixels_on_tape(t, v[0], v[1], v[2], v[3])
        })),
    });

    list.push(SuiteEntry {
        name: "pipeline_end_to_end",
        trials: 1,
        make_inputs: Box::new(|r| e2e_inputs(&e2e_config(), r)),
        op: Box::new(e2e_program("pipeline_end_to_end", e2e_config())),
    });

    list.push(SuiteEntry {
        name: "pipeline_end_to_end_4stuff",
        trials: 1,
        make_inputs: Box::new(|r| e2e_inputs(&e2e_config_4stuff(), r)),
        op: Box::new(e2e_program("pipeline_end_to_end_4stuff", e2e_config_4stuff())),
    });

    list
}

/// Everything `run_suite` reports for one registry entry.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Run the (optionally filtered) registry. `inject_fault` appends a
/// deliberately corrupted backward pass that must fail, proving the checker
/// detects wrong gradients.
pub fn run_suite(
    filter: Option<&str>,
    eps: f64,
    tol: f64,
    seed: u64,
    inject_fault: bool,
) -> Result<Vec<SuiteReport>> {
    let mut all = entries();
    if inject_fault {
        all.push(SuiteEntry {
            name: "matmul_fault_injection",
            trials: 1,
            make_inputs: Box::new(|r| vec![uni(r, 4, 5), uni(r, 5, 3)]),
            op: Box::new(CorruptedBackward::new(
                TapeProgram::new("matmul", |t: &mut crate::tensor::Tape, v: &[crate::tensor::Var]| {
                    t.matmul(v[0], v[1])
                }),
                1.01,
            )),
        });
    }
    let selected: Vec<SuiteEntry> = all
        .into_iter()
        .filter(|e| filter.map(|f| e.name.contains(f)).unwrap_or(true))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config(format!(
            "no ops matched filter '{}'",
            filter.unwrap_or("")
        )));
    }

    let mut reports = Vec::with_capacity(selected.len());
    for (index, entry) in selected.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut pass = true;
        for trial in 0..entry.trials {
            let trial_seed = seed
                .wrapping_add(index as u64 * 1_000_003)
                .wrapping_add(trial as u64 * 7919);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let inputs = (entry.make_inputs)(&mut rng);
            let report: GradCheckReport =
                grad_check(entry.op.as_ref(), &inputs, eps, tol, trial_seed ^ 0xA5A5)?;
            worst = worst.max(report.max_rel_err);
            pass &= report.pass;
        }
        reports.push(SuiteReport {
            name: entry.name.to_string(),
            trials: entry.trials,
            max_rel_err: worst,
            pass,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_matches_substring() {
        let reports = run_suite(Some("softmax"), 1e-5, 1e-4, 9, false).unwrap();
        assert!(reports.len() >= 3);
        assert!(reports.iter().all(|r| r.name.contains("softmax")));
    }

    #[test]
    fn unknown_filter_is_an_error() {
        assert!(run_suite(Some("no_such_op"), 1e-5, 1e-4, 9, false).is_err());
    }

    #[test]
    fn fault_injection_is_detected() {
        let reports = run_suite(Some("fault"), 1e-5, 1e-4, 9, true).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(!reports[0].pass);
    }
}
