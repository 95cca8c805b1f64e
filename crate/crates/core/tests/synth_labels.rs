//! Window labels on generated data against the generator's own manifest.

use avianrisk::data::{integrate, read_outbreaks, read_telemetry};
use avianrisk::features::{featurize, Window, WindowConfig};
use avianrisk::geo::{GeoConfig, GeoLayers};
use avianrisk::synth::{generate, Manifest, SynthConfig};

fn windows_for(cfg: &SynthConfig) -> (Vec<Window>, Manifest) {
    let out = generate(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_to(dir.path()).unwrap();
    let geo = GeoConfig::default();
    let layers = GeoLayers::load_dir(&dir.path().join("layers")).unwrap();
    let (fixes, rep) = read_telemetry(&dir.path().join("telemetry.csv")).unwrap();
    assert!(rep.rejected_lines.is_empty());
    let (events, _) = read_outbreaks(&dir.path().join("outbreaks.csv"), &layers).unwrap();
    let table = integrate(&fixes, &events, &layers, &geo);
    let windows = featurize(&table, &events, &geo, &WindowConfig::default()).unwrap();
    (windows, out.manifest)
}

fn expected(m: &Manifest, w: &Window) -> f64 {
    let horizon = i64::from(WindowConfig::default().label_horizon_days);
    m.label_probability(w.endpoint.unit.as_deref().unwrap_or(""), w.endpoint.date, horizon)
}

/// Pooled realized prevalence and pooled expectation over several seeds;
/// windows sharing a unit-week share one draw, so a single dataset is too
/// clustered for a binomial tolerance.
fn pooled(null: bool, keep: impl Fn(&Manifest, &Window) -> bool) -> (f64, f64, usize) {
    let (mut pos, mut exp, mut n) = (0.0, 0.0, 0usize);
    for seed in 100..112 {
        let base = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let cfg = if null { base.null_control() } else { base };
        let (windows, m) = windows_for(&cfg);
        for w in windows.iter().filter(|w| keep(&m, w)) {
            pos += f64::from(w.label);
            exp += expected(&m, w);
            n += 1;
        }
    }
    (pos / n as f64, exp / n as f64, n)
}

#[test]
fn null_prevalence_matches_manifest() {
    let (realized, expect, n) = pooled(true, |_, _| true);
    assert!(n > 3000, "{n}");
    assert!((realized - expect).abs() <= 0.02, "realized {realized:.4} expected {expect:.4} over {n}");
}

#[test]
fn signal_base_rates_split_by_unit() {
    let is_hot = |m: &Manifest, w: &Window| w.endpoint.unit.as_ref().is_some_and(|u| m.risk_units.contains(u));
    let (hot, hot_exp, n_hot) = pooled(false, is_hot);
    let (cold, cold_exp, n_cold) = pooled(false, |m, w| !is_hot(m, w));
    assert!(n_hot > 500 && n_cold > 500, "{n_hot} {n_cold}");
    assert!((hot - hot_exp).abs() <= 0.03, "hot {hot:.4} vs {hot_exp:.4}");
    assert!((cold - cold_exp).abs() <= 0.03, "cold {cold:.4} vs {cold_exp:.4}");
    assert!(hot - cold > 0.6, "hot {hot:.4} cold {cold:.4}");
}
