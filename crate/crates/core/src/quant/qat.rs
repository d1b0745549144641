//! Observer state carried through quantization-aware training.

use crate::error::{Error, Result};

use super::affine::{Observer, ObserverMode, QuantParams};

/// EMA decay of the activation observers.
pub const ACTIVATION_EMA_DECAY: f32 = 0.99;

/// Fixed grid of the network input: pixels in `[0, 1]` on 1/255 steps.
pub fn input_qparams() -> QuantParams {
    QuantParams::new(1.0 / 255.0, 0).expect("valid constant")
}

/// One activation observer per conv/linear output plus the fixed input grid.
///
/// Weights are not observed here: their parameters are recomputed from the
/// current values at every forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QatState {
    input: QuantParams,
    sites: Vec<Observer>,
    // exact parameters of a resumed site, kept until it observes new data
    pinned: Vec<Option<QuantParams>>,
    enabled: bool,
}

impl QatState {
    pub fn new(num_sites: usize) -> Self {
        Self::with_mode(
            num_sites,
            ObserverMode::Ema {
                decay: ACTIVATION_EMA_DECAY,
            },
        )
    }

    pub fn with_mode(num_sites: usize, mode: ObserverMode) -> Self {
        let obs = match mode {
            ObserverMode::MinMax => Observer::min_max(),
            ObserverMode::Ema { decay } => Observer::ema(decay),
        };
        Self {
            input: input_qparams(),
            sites: vec![obs; num_sites],
            pinned: vec![None; num_sites],
            enabled: true,
        }
    }

    /// State resumed from already-learned activation parameters.
    pub fn seeded(input: QuantParams, sites: &[QuantParams]) -> Self {
        let mode = ObserverMode::Ema {
            decay: ACTIVATION_EMA_DECAY,
        };
        Self {
            input,
            sites: sites.iter().map(|&qp| Observer::seeded(mode, qp)).collect(),
            pinned: sites.iter().map(|&qp| Some(qp)).collect(),
            enabled: true,
        }
    }

    /// Same sites, quantization switched off: every fake-quant node becomes
    /// the identity.
    pub fn disabled(num_sites: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(num_sites)
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.input
    }

    pub fn observer(&self, site: usize) -> &Observer {
        &self.sites[site]
    }

    pub fn observe(&mut self, site: usize, values: &[f32]) {
        self.sites[site].update(values);
        self.pinned[site] = None;
    }

    pub fn site_qparams(&self, site: usize) -> Result<QuantParams> {
        if let Some(Some(qp)) = self.pinned.get(site) {
            return Ok(*qp);
        }
        self.sites
            .get(site)
            .ok_or_else(|| Error::config(format!("no activation site {site}")))?
            .qparams()
    }

    /// Whether every site has seen at least one batch.
    pub fn is_calibrated(&self) -> bool {
        self.sites.iter().all(|o| o.range().is_some())
    }

    pub fn activation_qparams(&self) -> Result<Vec<QuantParams>> {
        (0..self.sites.len())
            .map(|s| self.site_qparams(s))
            .collect()
    }
}
