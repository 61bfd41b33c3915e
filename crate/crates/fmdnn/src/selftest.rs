//! Fast built-in verification: a handful of analytic checks that catch the
//! failure modes unit tests have caught historically, runnable from the
//! installed binary with no dataset or fixtures.

use fmdnn_core::fuzzy::{
    fuse_plain, fuzzy_features, gaussian_membership, sigmoid_membership, softmax3,
    trapezoid_membership, MembershipParams,
};
use fmdnn_core::metrics::{compute_metrics, Confusion};
use fmdnn_core::{Graph, Rng, Tensor};

pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn suite(name: &'static str, outcome: std::result::Result<String, String>) -> SuiteResult {
    match outcome {
        Ok(detail) => SuiteResult {
            name,
            pass: true,
            detail,
        },
        Err(detail) => SuiteResult {
            name,
            pass: false,
            detail,
        },
    }
}

fn membership_suite() -> SuiteResult {
    suite("membership-function", (|| {
        let p = MembershipParams::default();
        let probe: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let gray = Tensor::new(&[101], probe.clone()).map_err(|e| e.to_string())?;

        let mu = 0.4;
        let sigma = 0.2;
        let g = gaussian_membership(&gray, mu, sigma, false);
        let peak = g.data[40];
        if (peak - 1.0).abs() > 1e-12 {
            return Err(format!("gaussian peak at mu is {peak}, want 1"));
        }
        for (i, &v) in g.data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("gaussian value {v} outside [0,1] at {i}"));
            }
        }
        // 0.2 and 0.6 sit equidistant from mu = 0.4
        if (g.data[20] - g.data[60]).abs() > 1e-12 {
            return Err("gaussian not symmetric about mu".into());
        }

        let s = sigmoid_membership(&gray, p.alpha, p.beta);
        if (s.data[50] - 0.5).abs() > 1e-12 {
            return Err(format!("sigmoid at beta is {}, want 0.5", s.data[50]));
        }
        for w in s.data.windows(2) {
            if w[1] < w[0] {
                return Err("sigmoid not monotone".into());
            }
        }

        let t = trapezoid_membership(&gray, p.trap_a, p.trap_b, p.trap_c, p.trap_d)
            .map_err(|e| e.to_string())?;
        if t.data[10] != 0.0 || t.data[90] != 0.0 {
            return Err("trapezoid nonzero at outer breakpoints".into());
        }
        if t.data[30] != 1.0 || t.data[50] != 1.0 || t.data[70] != 1.0 {
            return Err("trapezoid plateau is not exactly 1".into());
        }
        if (t.data[20] - 0.5).abs() > 1e-12 {
            return Err(format!("trapezoid midpoint rise is {}", t.data[20]));
        }

        let feats = fuzzy_features(&gray, &p).map_err(|e| e.to_string())?;
        let weights = softmax3([0.3, -0.1, 0.7]);
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(format!("softmax3 weights sum to {wsum}"));
        }
        let fused = fuse_plain(&feats, weights, 0.05).map_err(|e| e.to_string())?;
        for &v in &fused.data {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("fused value {v} outside [0,1]"));
            }
        }
        Ok("101-point probe: peaks, plateau, monotonicity, fusion containment".into())
    })())
}

fn softmax_suite() -> SuiteResult {
    suite("softmax", (|| {
        let mut rng = Rng::seed_from_u64(11);
        for trial in 0..20 {
            let rows = 1 + trial % 5;
            let cols = 2 + trial % 7;
            let scale = if trial % 3 == 0 { 500.0 } else { 3.0 };
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.uniform_in(-scale, scale))
                .collect();
            let x = Tensor::new(&[rows, cols], data).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let v = g.leaf(x);
            let s = g.softmax(v).map_err(|e| e.to_string())?;
            let out = g.value(s);
            for r in 0..rows {
                let row = &out.data[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("row sum {sum} at trial {trial}"));
                }
                if row.iter().any(|&p| p < 0.0) {
                    return Err(format!("negative probability at trial {trial}"));
                }
            }
        }
        // two-logit closed form: softmax([a, b]) = [1, e^(b-a)] / (1 + e^(b-a))
        let mut g = Graph::new();
        let v = g.leaf(Tensor::new(&[1, 2], vec![0.2, -1.3]).map_err(|e| e.to_string())?);
        let s = g.softmax(v).map_err(|e| e.to_string())?;
        let got = g.value(s).data.clone();
        let e = (-1.5f64).exp();
        let want = [1.0 / (1.0 + e), e / (1.0 + e)];
        for (a, b) in got.iter().zip(&want) {
            if (a - b).abs() > 1e-12 {
                return Err(format!("closed form mismatch: {got:?} vs {want:?}"));
            }
        }
        Ok("20 random matrices row-stochastic, extreme logits stable, closed form matches".into())
    })())
}

fn metric_suite() -> SuiteResult {
    suite("metric-oracle", (|| {
        // hand-tallied confusion [[5,1],[2,4]]
        let mut conf = Confusion::new(2).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            conf.record(0, 0).map_err(|e| e.to_string())?;
        }
        conf.record(0, 1).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            conf.record(1, 0).map_err(|e| e.to_string())?;
        }
        for _ in 0..4 {
            conf.record(1, 1).map_err(|e| e.to_string())?;
        }
        let m = compute_metrics(&conf).map_err(|e| e.to_string())?;
        if m.acc != 0.75 {
            return Err(format!("acc {} want exactly 0.75", m.acc));
        }
        let tpr_want = (5.0 / 6.0 + 4.0 / 6.0) / 2.0;
        let tnr_want = (4.0 / 6.0 + 5.0 / 6.0) / 2.0;
        let ppv_want = (5.0 / 7.0 + 4.0 / 5.0) / 2.0;
        let f1_c0 = 2.0 * (5.0 / 7.0) * (5.0 / 6.0) / (5.0 / 7.0 + 5.0 / 6.0);
        let f1_c1 = 2.0 * (4.0 / 5.0) * (4.0 / 6.0) / (4.0 / 5.0 + 4.0 / 6.0);
        let f1_want = (f1_c0 + f1_c1) / 2.0;
        for (name, got, want) in [
            ("tpr", m.tpr, tpr_want),
            ("tnr", m.tnr, tnr_want),
            ("ppv", m.ppv, ppv_want),
            ("f1", m.f1, f1_want),
        ] {
            if (got - want).abs() > 1e-12 {
                return Err(format!("{name} {got} want {want}"));
            }
        }
        Ok("confusion [[5,1],[2,4]]: acc exactly 0.75, macro rates match hand tally".into())
    })())
}

fn gradcheck_suite() -> SuiteResult {
    suite("gradient-check", (|| {
        let mut rng = Rng::seed_from_u64(23);
        let xd: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let wd: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
        let x0 = Tensor::new(&[2, 6, 6], xd).map_err(|e| e.to_string())?;
        let w0 = Tensor::new(&[3, 2, 3, 3], wd).map_err(|e| e.to_string())?;

        // loss = sum(y^2) where y = maxpool2(relu(conv(x, w)))
        let eval = |x: &Tensor, w: &Tensor| -> std::result::Result<f64, String> {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let c = g.conv2d(xv, wv, 1, 1).map_err(|e| e.to_string())?;
            let r = g.relu(c);
            let p = g.max_pool(r, 2).map_err(|e| e.to_string())?;
            let sq = g.mul(p, p).map_err(|e| e.to_string())?;
            let s = g.sum_all(sq);
            Ok(g.value(s).data[0])
        };

        let mut g = Graph::new();
        let xv = g.leaf(x0.clone());
        let wv = g.leaf(w0.clone());
        let c = g.conv2d(xv, wv, 1, 1).map_err(|e| e.to_string())?;
        let r = g.relu(c);
        let p = g.max_pool(r, 2).map_err(|e| e.to_string())?;
        let sq = g.mul(p, p).map_err(|e| e.to_string())?;
        let s = g.sum_all(sq);
        let grads = g.backward(s).map_err(|e| e.to_string())?;

        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (var, tensor, is_x) in [(xv, &x0, true), (wv, &w0, false)] {
            let analytic = grads
                .get(var)
                .ok_or_else(|| "missing leaf gradient".to_string())?;
            let n = tensor.len();
            for pick in 0..5 {
                let idx = (pick * 17 + 3) % n;
                let mut plus = tensor.clone();
                let mut minus = tensor.clone();
                plus.data[idx] += eps;
                minus.data[idx] -= eps;
                let (fp, fm) = if is_x {
                    (eval(&plus, &w0)?, eval(&minus, &w0)?)
                } else {
                    (eval(&x0, &plus)?, eval(&x0, &minus)?)
                };
                let fd = (fp - fm) / (2.0 * eps);
                let ad = analytic[idx];
                let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
                if rel > 1e-6 {
                    return Err(format!(
                        "coordinate {idx}: analytic {ad} vs finite difference {fd} (rel {rel:.2e})"
                    ));
                }
            }
        }
        Ok(format!(
            "{checked} coordinates through conv/relu/maxpool, worst rel {worst:.2e}"
        ))
    })())
}

pub fn run_all() -> Vec<SuiteResult> {
    vec![
        membership_suite(),
        softmax_suite(),
        metric_suite(),
        gradcheck_suite(),
    ]
}

/// Fixed-width table plus the overall verdict.
pub fn render(results: &[SuiteResult]) -> (String, bool) {
    let mut out = String::new();
    out.push_str(&format!("{:<22} {:<6} detail\n", "suite", "result"));
    let mut all = true;
    for r in results {
        all &= r.pass;
        out.push_str(&format!(
            "{:<22} {:<6} {}\n",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        ));
    }
    out.push_str(if all { "selftest: all suites passed\n" } else { "selftest: FAILURES\n" });
    (out, all)
}
