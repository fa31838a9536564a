//! Hand-written aggregate over the discrete metric grid.

use deskdrive_core::oracle::MetricVector;

pub const EP_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const THREE: [f64; 3] = [0.0, 0.5, 1.0];
const TWO: [f64; 2] = [0.0, 1.0];

/// Default weights written out: TTC 5, EP 5, HC 2, LK 2.
pub fn reference_epdms(a: &MetricVector, h: &MetricVector) -> f64 {
    let f = |agent: f64, human: f64| if human < 1.0 { 1.0 } else { agent };
    let penalty = f(a.nc, h.nc) * f(a.dac, h.dac) * f(a.ddc, h.ddc) * f(a.tlc, h.tlc);
    penalty * (5.0 * f(a.ttc, h.ttc) + 5.0 * a.ep + 2.0 * f(a.hc, h.hc) + 2.0 * f(a.lk, h.lk)) / 14.0
}

/// Every combination of legal agent values, EP on a five-point grid.
pub fn agent_grid() -> Vec<MetricVector> {
    let mut out = Vec::new();
    for nc in THREE {
        for dac in TWO {
            for ddc in THREE {
                for tlc in TWO {
                    for ep in EP_GRID {
                        for ttc in TWO {
                            for lk in TWO {
                                for hc in TWO {
                                    out.push(MetricVector { nc, dac, ddc, tlc, ep, ttc, lk, hc, ec: None });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every human vector (EP does not participate in the filter).
pub fn human_grid() -> Vec<MetricVector> {
    agent_grid().into_iter().filter(|m| m.ep == 1.0).collect()
}

/// Legal values of each discrete field, in increasing order.
pub fn domain_of(field: usize) -> &'static [f64] {
    match field {
        0 | 2 => &THREE,
        4 => &EP_GRID,
        _ => &TWO,
    }
}

/// Field accessors in NC, DAC, DDC, TLC, EP, TTC, LK, HC order.
pub fn field(m: &MetricVector, i: usize) -> f64 {
    [m.nc, m.dac, m.ddc, m.tlc, m.ep, m.ttc, m.lk, m.hc][i]
}

pub fn with_field(m: &MetricVector, i: usize, v: f64) -> MetricVector {
    let mut out = *m;
    match i {
        0 => out.nc = v,
        1 => out.dac = v,
        2 => out.ddc = v,
        3 => out.tlc = v,
        4 => out.ep = v,
        5 => out.ttc = v,
        6 => out.lk = v,
        _ => out.hc = v,
    }
    out
}
