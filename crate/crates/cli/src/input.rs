//! Measurement / scenario file schema.
//!
//! All ranges are in meters (times already multiplied by the signal speed),
//! the response schedule in seconds, the true clock offset in seconds and the
//! true drift in ppm.

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use twtoa::scenario::{AnchorSet, MeasurementSet, NoiseSpec, RespSigmaModel, UdState, DEFAULT_RESPONSE_INTERVAL};
use twtoa::{meters_to_seconds, mps_to_ppm, ppm_to_mps, seconds_to_meters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Shared(f64),
    PerAnchor(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub p_m: Vec<f64>,
    pub v_mps: Vec<f64>,
    pub offset_s: f64,
    pub drift_ppm: f64,
}

impl TruthFile {
    pub fn from_state(ud: &UdState) -> Self {
        Self {
            p_m: ud.p.as_slice().to_vec(),
            v_mps: ud.v.as_slice().to_vec(),
            offset_s: meters_to_seconds(ud.b),
            drift_ppm: mps_to_ppm(ud.w),
        }
    }

    pub fn to_state(&self) -> Result<UdState> {
        if self.p_m.len() != self.v_mps.len() {
            bail!("truth: `p_m` and `v_mps` differ in length");
        }
        Ok(UdState::new(
            DVector::from_vec(self.p_m.clone()),
            DVector::from_vec(self.v_mps.clone()),
            seconds_to_meters(self.offset_s),
            ppm_to_mps(self.drift_ppm),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementFile {
    /// One coordinate list per anchor.
    pub anchors_m: Vec<Vec<f64>>,
    /// Request-to-response interval per anchor; defaults to 10 ms × index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_m: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_req_m: Option<SigmaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_resp_m: Option<f64>,
    /// Alternative to explicit sigmas; needs `truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthFile>,
}

impl MeasurementFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid measurement file {}", path.display()))
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        let positions: Vec<DVector<f64>> = self.anchors_m.iter().map(|q| DVector::from_vec(q.clone())).collect();
        let schedule = match &self.schedule_s {
            Some(s) => s.clone(),
            None => (1..=positions.len()).map(|i| DEFAULT_RESPONSE_INTERVAL * i as f64).collect(),
        };
        Ok(AnchorSet::new(positions, schedule).context("field `anchors_m` / `schedule_s`")?)
    }

    pub fn truth_state(&self) -> Result<Option<UdState>> {
        self.truth.as_ref().map(TruthFile::to_state).transpose()
    }

    pub fn measurements(&self, anchors: &AnchorSet) -> Result<MeasurementSet> {
        let rho = self.rho_m.clone().context("missing field `rho_m`")?;
        let tau = self.tau_m.clone().context("missing field `tau_m`")?;
        Ok(MeasurementSet::new(rho, tau, anchors.schedule().to_vec()).context("fields `rho_m` / `tau_m`")?)
    }

    pub fn noise(&self, anchors: &AnchorSet) -> Result<NoiseSpec> {
        match (&self.sigma_req_m, self.sigma_resp_m, self.snr_db) {
            (Some(req), Some(resp), _) => {
                let req = match req {
                    SigmaSpec::Shared(s) => vec![*s; anchors.len()],
                    SigmaSpec::PerAnchor(v) => v.clone(),
                };
                Ok(NoiseSpec::new(req, resp).context("fields `sigma_req_m` / `sigma_resp_m`")?)
            }
            (None, None, Some(snr)) => {
                let truth = self.truth_state()?.context("field `snr_db` needs `truth`")?;
                Ok(NoiseSpec::from_snr(anchors, &truth.p, snr, RespSigmaModel::default()).context("field `snr_db`")?)
            }
            (Some(_), None, _) => bail!("missing field `sigma_resp_m`"),
            (None, Some(_), _) => bail!("missing field `sigma_req_m`"),
            (None, None, None) => bail!("missing noise description: give `sigma_req_m` and `sigma_resp_m`, or `snr_db`"),
        }
    }
}
