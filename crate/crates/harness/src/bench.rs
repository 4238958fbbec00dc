//! Per-decision latency, field upkeep, parameter counts and
//! conditioned-input lengths of several policies on the same inputs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfdp_core::policy::{Conditioner, ObservationWindow, Policy, VariantKind};
use tfdp_core::simenv::{generate_dataset, Env};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: VariantKind,
    pub decisions: usize,
    /// Median wall-clock of one decision, including the field and raster
    /// upkeep of the steps since the previous decision.
    pub latency_ms: f64,
    /// Median field and raster upkeep per decision.
    pub field_ms: f64,
    pub params: usize,
    /// Image values fed to the network per decision.
    pub input_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, variant: VariantKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Relative latency increase over the DP row.
    pub fn latency_overhead(&self, variant: VariantKind) -> Option<f64> {
        let base = self.get(VariantKind::Dp)?.latency_ms;
        Some(self.get(variant)?.latency_ms / base - 1.0)
    }

    /// Conditioned-input length relative to the DP row.
    pub fn input_ratio(&self, variant: VariantKind) -> Option<f64> {
        let base = self.get(VariantKind::Dp)?.input_len as f64;
        Some(self.get(variant)?.input_len as f64 / base)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,decisions,latency_ms,field_ms,params,input_len,input_ratio,latency_overhead\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.4},{},{},{},{}",
                r.variant,
                r.decisions,
                r.latency_ms,
                r.field_ms,
                r.params,
                r.input_len,
                opt(self.input_ratio(r.variant)),
                opt(self.latency_overhead(r.variant))
            );
        }
        s
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Replays a noiseless expert demonstration, as often as needed, through
/// every policy and times each decision point. Policies take turns on
/// every decision so slow drifts of the machine affect all of them alike.
/// The first `warmup` decisions are not recorded.
pub fn bench_efficiency(policies: &[Policy], env: &Env, scene_hash: &str, decisions: usize, warmup: usize) -> Result<BenchReport> {
    let first = policies.first().ok_or_else(|| HarnessError::Usage("nothing to benchmark".into()))?;
    let widths = |p: &Policy| p.ck.params.spec.layer_widths[1..p.ck.params.spec.layer_widths.len() - 1].to_vec();
    if policies.iter().any(|p| widths(p) != widths(first)) {
        return Err(HarnessError::Usage("benchmarked policies must share hidden widths".into()));
    }
    for p in policies {
        p.ck.check_scene(scene_hash)?;
    }
    let conditioner = Conditioner::from_env(env);
    let mut latency = vec![Vec::new(); policies.len()];
    let mut field = vec![Vec::new(); policies.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = 0usize;
    let demo = generate_dataset(env, scene_hash, 1, 0, 0.0)?.demos.remove(0);
    while latency[0].len() < decisions {
        let mut windows: Vec<ObservationWindow> = policies.iter().map(|p| ObservationWindow::new(p.variant(), &conditioner)).collect();
        for (t, obs) in demo.observations.iter().enumerate() {
            let prev = if t == 0 { obs.ee } else { demo.actions[t - 1] };
            for w in windows.iter_mut() {
                w.push(obs, prev);
            }
            if t % first.variant().exec_horizon != 0 {
                continue;
            }
            seen += 1;
            for (i, (p, w)) in policies.iter().zip(windows.iter_mut()).enumerate() {
                let start = Instant::now();
                let cond = w.cond(&p.ck.normalizer);
                let chunk = p.sample_chunks(&cond, obs.ee, 1, &mut rng)?;
                std::hint::black_box(chunk);
                let ms = start.elapsed().as_secs_f64() * 1e3 + w.field_ms;
                if seen > warmup {
                    latency[i].push(ms);
                    field[i].push(w.field_ms);
                }
                w.field_ms = 0.0;
            }
            if latency[0].len() >= decisions {
                break;
            }
        }
    }
    let pixels = conditioner.pixels();
    let rows = policies
        .iter()
        .enumerate()
        .map(|(i, p)| BenchRow {
            variant: p.variant().kind,
            decisions: latency[i].len(),
            latency_ms: median(&mut latency[i]),
            field_ms: median(&mut field[i]),
            params: p.ck.params.param_count(),
            input_len: p.variant().observation_len(pixels),
        })
        .collect();
    Ok(BenchReport { rows })
}
