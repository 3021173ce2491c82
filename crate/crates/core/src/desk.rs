//! Desk-scale aorto-iliac surrogate: a fixed bifurcation network whose
//! nominal outlet boundary conditions land near 120/80 mmHg with a 42% left
//! flow split, plus the three boundary-condition parameterizations used for
//! inference (total RC, per-side RC with fixed ratio, per-side RCR).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::circuit::{
    BranchConfig, CircuitError, RcrBoundary, Result, Side, Station, StenosisLocation, StenosisSpec,
    TopologyConfig, VesselElement,
};
use crate::inflow::{fit_fourier, FourierInflow, WaveformShape};

pub const AORTA_SEGMENT: VesselElement = VesselElement {
    r: 20.0,
    c: 1e-4,
    l: 0.0,
};
pub const ILIAC_SEGMENT: VesselElement = VesselElement {
    r: 60.0,
    c: 4e-5,
    l: 0.0,
};
pub const ILIAC_SEGMENTS: usize = 3;
/// Reference lumen area of the iliac branches, cm².
pub const ILIAC_AREA: f64 = 0.785;

pub const NOMINAL_LEFT: RcrBoundary = RcrBoundary {
    rp: 281.2,
    c: 1.775e-4,
    rd: 4308.0,
    p_ref: 0.0,
};
pub const NOMINAL_RIGHT: RcrBoundary = RcrBoundary {
    rp: 233.2,
    c: 3.161e-4,
    rd: 3126.0,
    p_ref: 0.0,
};

/// Proximal-to-distal resistance ratio held fixed in the RC cases.
pub const RP_RD_RATIO: f64 = 8.84e-2;
/// Share of the mean inflow leaving through the left outlet.
pub const LEFT_FLOW_FRACTION: f64 = 0.42;

pub const NOMINAL_RC2: [f64; 2] = [1861.0, 9.61e-4];
pub const NOMINAL_RC4: [f64; 4] = [4399.0, 3.678e-4, 3228.0, 5.949e-4];
pub const NOMINAL_RCR6: [f64; 6] = [281.2, 4308.0, 1.775e-4, 233.2, 3126.0, 3.161e-4];

pub const INFLOW_MEAN: f64 = 62.0;
pub const INFLOW_PEAK: f64 = 250.0;

/// Station of each lesion tag: A–C down the left iliac, D–F down the right.
pub fn station(loc: StenosisLocation) -> Station {
    let i = loc.index();
    Station {
        branch: if i < 3 { "left_iliac" } else { "right_iliac" }.to_string(),
        segment: i % 3,
    }
}

/// Surrogate topology with nominal RCRs and an optional lesion.
pub fn topology(lesion: Option<(StenosisLocation, f64)>) -> TopologyConfig {
    let iliac = |name: &str, bc: RcrBoundary, side: Side| BranchConfig {
        name: name.to_string(),
        parent: Some("aorta".to_string()),
        segments: vec![ILIAC_SEGMENT; ILIAC_SEGMENTS],
        outlet: Some(bc),
        side: Some(side),
    };
    let stations: HashMap<_, _> = StenosisLocation::ALL.iter().map(|&l| (l, station(l))).collect();
    TopologyConfig {
        branches: vec![
            BranchConfig {
                name: "aorta".to_string(),
                parent: None,
                segments: vec![AORTA_SEGMENT],
                outlet: None,
                side: None,
            },
            iliac("left_iliac", NOMINAL_LEFT, Side::Left),
            iliac("right_iliac", NOMINAL_RIGHT, Side::Right),
        ],
        stations,
        stenoses: lesion
            .filter(|&(_, s)| s > 0.0)
            .map(|(location, severity)| StenosisSpec::Geometry {
                location,
                severity,
                area0: ILIAC_AREA,
                length: 1.0,
            })
            .into_iter()
            .collect(),
        inflow: "desk".to_string(),
    }
}

pub fn nominal_shape() -> WaveformShape {
    WaveformShape {
        mean: INFLOW_MEAN,
        systolic_peak: INFLOW_PEAK,
        ..WaveformShape::default()
    }
}

/// Nine-harmonic fit of the nominal waveform.
pub fn nominal_inflow() -> FourierInflow {
    let shape = nominal_shape();
    fit_fourier(&shape.sample(512), shape.period, 9).expect("nominal waveform fits")
}

/// How an inference vector maps onto the two outlet RCRs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcParam {
    /// `[R_tot, C_tot]`, shared across outlets by the nominal flow fractions.
    Rc2,
    /// `[R_left, C_left, R_right, C_right]` with fixed Rp/Rd.
    Rc4,
    /// `[Rp_l, Rd_l, C_l, Rp_r, Rd_r, C_r]`.
    Rcr6,
}

impl BcParam {
    pub fn dim(self) -> usize {
        match self {
            BcParam::Rc2 => 2,
            BcParam::Rc4 => 4,
            BcParam::Rcr6 => 6,
        }
    }

    pub fn nominal(self) -> Vec<f64> {
        match self {
            BcParam::Rc2 => NOMINAL_RC2.to_vec(),
            BcParam::Rc4 => NOMINAL_RC4.to_vec(),
            BcParam::Rcr6 => NOMINAL_RCR6.to_vec(),
        }
    }

    pub fn names(self) -> Vec<String> {
        let v: &[&str] = match self {
            BcParam::Rc2 => &["R_tot", "C_tot"],
            BcParam::Rc4 => &["R_left", "C_left", "R_right", "C_right"],
            BcParam::Rcr6 => &["Rp_left", "Rd_left", "C_left", "Rp_right", "Rd_right", "C_right"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Outlet boundaries `[left, right]` for parameter vector `x`.
    pub fn outlets(self, x: &[f64]) -> Result<[RcrBoundary; 2]> {
        if x.len() != self.dim() {
            return Err(CircuitError::BadSettings(format!(
                "{self:?} expects {} parameters, got {}",
                self.dim(),
                x.len()
            )));
        }
        let split = |r: f64, c: f64| RcrBoundary {
            rp: r * RP_RD_RATIO / (1.0 + RP_RD_RATIO),
            rd: r / (1.0 + RP_RD_RATIO),
            c,
            p_ref: 0.0,
        };
        Ok(match self {
            BcParam::Rc2 => {
                let (fl, fr) = (LEFT_FLOW_FRACTION, 1.0 - LEFT_FLOW_FRACTION);
                [split(x[0] / fl, x[1] * fl), split(x[0] / fr, x[1] * fr)]
            }
            BcParam::Rc4 => [split(x[0], x[1]), split(x[2], x[3])],
            BcParam::Rcr6 => [
                RcrBoundary {
                    rp: x[0],
                    rd: x[1],
                    c: x[2],
                    p_ref: 0.0,
                },
                RcrBoundary {
                    rp: x[3],
                    rd: x[4],
                    c: x[5],
                    p_ref: 0.0,
                },
            ],
        })
    }

    /// Topology with the outlets replaced according to `x`.
    pub fn apply(self, cfg: &mut TopologyConfig, x: &[f64]) -> Result<()> {
        let [left, right] = self.outlets(x)?;
        for b in &mut cfg.branches {
            match b.side {
                Some(Side::Left) if b.outlet.is_some() => b.outlet = Some(left),
                Some(Side::Right) if b.outlet.is_some() => b.outlet = Some(right),
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build_network, simulate, summarize, SimSettings};

    fn parallel(a: &RcrBoundary, b: &RcrBoundary) -> f64 {
        1.0 / (1.0 / (a.rp + a.rd) + 1.0 / (b.rp + b.rd))
    }

    #[test]
    fn rc2_preserves_totals() {
        let [l, r] = BcParam::Rc2.outlets(&NOMINAL_RC2).unwrap();
        assert!((parallel(&l, &r) - 1861.0).abs() < 1e-9);
        assert!((l.c + r.c - 9.61e-4).abs() < 1e-15);
        assert!((l.rp / l.rd - RP_RD_RATIO).abs() < 1e-12);
    }

    #[test]
    fn nominal_network_is_near_clinical_targets() {
        let net = build_network(&topology(None)).unwrap();
        let s = summarize(&simulate(&net, &nominal_inflow(), &SimSettings::default()).unwrap()).unwrap();
        assert!((s.p_sys - 120.0).abs() < 3.0, "{s:?}");
        assert!((s.p_dia - 80.0).abs() < 3.0, "{s:?}");
        assert!((s.flow_split_left - 42.0).abs() < 1.5, "{s:?}");
    }

    #[test]
    fn lesion_lands_on_its_side() {
        for loc in StenosisLocation::ALL {
            let net = build_network(&topology(Some((loc, 0.5)))).unwrap();
            let (branch, _) = net.stenoses().next().unwrap();
            let left = loc.index() < 3;
            assert_eq!(branch.side, Some(if left { Side::Left } else { Side::Right }));
        }
        assert_eq!(build_network(&topology(Some((StenosisLocation::A, 0.0)))).unwrap().stenoses().count(), 0);
    }
}
