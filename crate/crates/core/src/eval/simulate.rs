use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dsp::ContourTracks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    Undecided,
}

impl Choice {
    /// Rendition index for a decided choice.
    pub fn index(self) -> Option<usize> {
        match self {
            Choice::A => Some(0),
            Choice::B => Some(1),
            Choice::Undecided => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub utterance_id: String,
    pub listener_id: usize,
    pub choice: Choice,
}

/// What a simulated listener responds to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressivityProxy {
    /// Population variance (Hz²) of the rendered F0 contour over voiced frames.
    #[default]
    RenderedF0Variance,
    /// Population variance of rendered phone durations, in frames².
    DurationVariance,
    /// Independent fair coin per response: a negative control.
    Random,
}

impl ExpressivityProxy {
    /// Proxy value of one rendition; `None` for [`ExpressivityProxy::Random`].
    pub fn measure(self, tracks: &ContourTracks) -> Option<f64> {
        let var = |xs: Vec<f64>| {
            if xs.is_empty() {
                return 0.0;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
        };
        match self {
            ExpressivityProxy::RenderedF0Variance => Some(var(tracks.voiced_f0().collect())),
            ExpressivityProxy::DurationVariance => Some(var(tracks.phone_frames.iter().map(|d| *d as f64).collect())),
            ExpressivityProxy::Random => None,
        }
    }
}

/// Simulated listening panel. Noise and margin are in proxy units; the
/// defaults (Hz² of rendered F0 variance) leave roughly a sixth of the
/// smoke-profile responses undecided.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelConfig {
    pub listeners: usize,
    pub noise_sigma: f64,
    pub undecided_margin: f64,
    pub proxy: ExpressivityProxy,
}

impl Default for PanelConfig {
    fn default() -> Self {
        Self {
            listeners: 30,
            noise_sigma: 300.0,
            undecided_margin: 200.0,
            proxy: ExpressivityProxy::RenderedF0Variance,
        }
    }
}

/// Proxy values of renditions A and B of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyPair {
    pub utterance_id: String,
    pub values: [f64; 2],
}

/// One response from listener `stream`: `Δ = s_A − s_B + noise`; within
/// the margin the listener is undecided, otherwise the larger side wins.
fn respond(pair: &ProxyPair, panel: &PanelConfig, rng: &mut ChaCha8Rng) -> Choice {
    if panel.proxy == ExpressivityProxy::Random {
        return if rng.gen_bool(0.5) { Choice::A } else { Choice::B };
    }
    let noise = if panel.noise_sigma > 0.0 {
        Normal::new(0.0, panel.noise_sigma)
            .expect("finite positive sigma")
            .sample(rng)
    } else {
        0.0
    };
    let delta = pair.values[0] - pair.values[1] + noise;
    if delta.abs() < panel.undecided_margin || delta == 0.0 {
        Choice::Undecided
    } else if delta > 0.0 {
        Choice::A
    } else {
        Choice::B
    }
}

/// Exactly `listeners × pairs` records, ordered by utterance then
/// listener. Each listener draws from an independent stream of `seed`.
pub fn simulate_preferences(
    pairs: &[ProxyPair],
    panel: &PanelConfig,
    seed: u64,
) -> Result<Vec<PreferenceRecord>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    if panel.listeners == 0 {
        return Err(EvalError::NoListeners);
    }
    if !(panel.noise_sigma >= 0.0 && panel.noise_sigma.is_finite()) || panel.undecided_margin.is_nan() {
        return Err(EvalError::BadPanel(format!(
            "noise_sigma {} / undecided_margin {}",
            panel.noise_sigma, panel.undecided_margin
        )));
    }
    let mut by_listener: Vec<Vec<Choice>> = Vec::with_capacity(panel.listeners);
    for listener in 0..panel.listeners {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(listener as u64);
        by_listener.push(pairs.iter().map(|p| respond(p, panel, &mut rng)).collect());
    }
    let mut records = Vec::with_capacity(pairs.len() * panel.listeners);
    for (u, pair) in pairs.iter().enumerate() {
        for (listener, choices) in by_listener.iter().enumerate() {
            records.push(PreferenceRecord {
                utterance_id: pair.utterance_id.clone(),
                listener_id: listener,
                choice: choices[u],
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<ProxyPair> {
        (0..n)
            .map(|i| ProxyPair {
                utterance_id: format!("u{i:02}"),
                values: [i as f64, 10.0 - i as f64],
            })
            .collect()
    }

    #[test]
    fn noiseless_panel_follows_proxy() {
        let panel = PanelConfig {
            listeners: 3,
            noise_sigma: 0.0,
            undecided_margin: 0.0,
            proxy: ExpressivityProxy::RenderedF0Variance,
        };
        let recs = simulate_preferences(&pairs(10), &panel, 1).unwrap();
        for r in recs {
            let i: usize = r.utterance_id[1..].parse().unwrap();
            let expected = match i {
                0..=4 => Choice::B,
                5 => Choice::Undecided,
                _ => Choice::A,
            };
            assert_eq!(r.choice, expected);
        }
    }

    #[test]
    fn infinite_margin_is_all_undecided() {
        let panel = PanelConfig {
            undecided_margin: f64::INFINITY,
            ..PanelConfig::default()
        };
        let recs = simulate_preferences(&pairs(4), &panel, 1).unwrap();
        assert!(recs.iter().all(|r| r.choice == Choice::Undecided));
    }

    #[test]
    fn shape_and_determinism() {
        let recs = simulate_preferences(&pairs(30), &PanelConfig::default(), 5).unwrap();
        assert_eq!(recs.len(), 900);
        assert_eq!(recs, simulate_preferences(&pairs(30), &PanelConfig::default(), 5).unwrap());
        assert!(simulate_preferences(&[], &PanelConfig::default(), 5).is_err());
    }
}
