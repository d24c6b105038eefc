//! Server-side aggregation of client uploads into the next global adapter.
//!
//! * adaptive: per rank-1 index `j`, a convex combination of the clients
//!   that uploaded `j`, weighted by each client's product norm `z_k`
//!   normalised by `Z[j] = Σ z_k` over those clients;
//! * zero-padding: uploads scattered into zero matrices and averaged over
//!   every sampled client, whether or not it touched `j`;
//! * fedavg: weighted mean of full-rank uploads.
//!
//! Contributions are always summed in ascending `client_id` order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HaflError, Result};
use crate::lora::{GlobalLora, LoraAdapter};
use crate::matrix::Matrix;
use crate::schemes::{ClientId, UploadPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Adaptive,
    ZeroPadding,
    Fedavg,
}

/// What the adaptive rule does with an index no client uploaded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleIndexRule {
    #[default]
    RetainPrevious,
    Zero,
}

impl fmt::Display for StaleIndexRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StaleIndexRule::RetainPrevious => "retain_previous",
            StaleIndexRule::Zero => "zero",
        })
    }
}

impl FromStr for StaleIndexRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retain_previous" => Ok(StaleIndexRule::RetainPrevious),
            "zero" => Ok(StaleIndexRule::Zero),
            other => Err(format!(
                "unknown stale index rule `{other}` (expected retain_previous or zero)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub kind: AggregationKind,
    pub stale_index_rule: StaleIndexRule,
}

/// Per-index norm totals and contributor counts for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationAccumulator {
    /// `Z[j]`: sum of `norm_z` over payloads selecting `j`.
    pub z: Vec<f64>,
    /// Number of payloads selecting `j`.
    pub contributors: Vec<usize>,
    pub sum_b: Matrix,
    pub sum_a: Matrix,
}

impl AggregationAccumulator {
    pub fn new(d: usize, l: usize, r_g: usize) -> Self {
        AggregationAccumulator {
            z: vec![0.0; r_g],
            contributors: vec![0; r_g],
            sum_b: Matrix::zeros(d, r_g),
            sum_a: Matrix::zeros(r_g, l),
        }
    }

    fn collect_norms(&mut self, payloads: &[&UploadPayload]) {
        for p in payloads {
            for &j in &p.selected {
                self.z[j] += p.norm_z;
                self.contributors[j] += 1;
            }
        }
    }

    /// Weight of a payload on index `j`. Falls back to uniform over
    /// contributors when every contributor uploaded a zero product.
    pub fn weight(&self, payload: &UploadPayload, j: usize) -> f64 {
        if self.z[j] > 0.0 {
            payload.norm_z / self.z[j]
        } else {
            1.0 / self.contributors[j] as f64
        }
    }

    fn add_scaled(&mut self, payload: &UploadPayload, pos: usize, j: usize, w: f64) {
        for r in 0..self.sum_b.rows() {
            let v = self.sum_b.get(r, j) + w * payload.b_cols.get(r, pos);
            self.sum_b.set(r, j, v);
        }
        let src = payload.a_rows.row(pos);
        for (dst, s) in self.sum_a.row_mut(j).iter_mut().zip(src) {
            *dst += w * s;
        }
    }
}

/// Validates payloads against the global shape and returns them sorted by
/// client id.
fn ordered_payloads<'a>(
    prev: &GlobalLora,
    payloads: &'a [UploadPayload],
) -> Result<Vec<&'a UploadPayload>> {
    if payloads.is_empty() {
        return Err(HaflError::Empty("payload set"));
    }
    let (d, l, r_g) = (
        prev.adapter.out_dim(),
        prev.adapter.in_dim(),
        prev.adapter.rank(),
    );
    let mut sorted: Vec<&UploadPayload> = payloads.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(HaflError::Protocol(format!(
                "duplicate payload from client {}",
                pair[0].client_id
            )));
        }
    }
    for p in &sorted {
        if !(p.norm_z >= 0.0 && p.norm_z.is_finite()) {
            return Err(HaflError::Protocol(format!(
                "client {} uploaded invalid norm {}",
                p.client_id, p.norm_z
            )));
        }
        if let Some(&j) = p.selected.iter().find(|&&j| j >= r_g) {
            return Err(HaflError::IndexOutOfRange {
                what: "payload rank-1",
                index: j,
                limit: r_g,
            });
        }
        let m = p.selected.len();
        if p.b_cols.shape() != (d, m) || p.a_rows.shape() != (m, l) {
            return Err(HaflError::shape(
                "payload slices",
                format!("B {d}x{m}, A {m}x{l}"),
                format!("B {:?}, A {:?}", p.b_cols.shape(), p.a_rows.shape()),
            ));
        }
        let mut seen = vec![false; r_g];
        for &j in &p.selected {
            if std::mem::replace(&mut seen[j], true) {
                return Err(HaflError::Protocol(format!(
                    "client {} selected index {j} twice",
                    p.client_id
                )));
            }
        }
    }
    Ok(sorted)
}

/// Per-index `(client, weight)` lists of the adaptive rule.
pub fn adaptive_weights(
    prev: &GlobalLora,
    payloads: &[UploadPayload],
) -> Result<Vec<Vec<(ClientId, f64)>>> {
    let sorted = ordered_payloads(prev, payloads)?;
    let mut acc =
        AggregationAccumulator::new(prev.adapter.out_dim(), prev.adapter.in_dim(), prev.rank());
    acc.collect_norms(&sorted);
    let mut out = vec![Vec::new(); prev.rank()];
    for p in &sorted {
        for &j in &p.selected {
            out[j].push((p.client_id, acc.weight(p, j)));
        }
    }
    Ok(out)
}

pub fn aggregate_adaptive(
    prev: &GlobalLora,
    payloads: &[UploadPayload],
    rule: StaleIndexRule,
) -> Result<GlobalLora> {
    let sorted = ordered_payloads(prev, payloads)?;
    let g = &prev.adapter;
    let mut acc = AggregationAccumulator::new(g.out_dim(), g.in_dim(), g.rank());
    acc.collect_norms(&sorted);
    for p in &sorted {
        for (pos, &j) in p.selected.iter().enumerate() {
            let w = acc.weight(p, j);
            acc.add_scaled(p, pos, j, w);
        }
    }
    if rule == StaleIndexRule::RetainPrevious {
        for j in (0..g.rank()).filter(|&j| acc.contributors[j] == 0) {
            acc.sum_b.set_column(j, &g.b().column(j));
            acc.sum_a.set_row(j, g.a().row(j));
        }
    }
    Ok(GlobalLora {
        adapter: LoraAdapter::new(acc.sum_b, acc.sum_a, g.scale())?,
        round: prev.round + 1,
    })
}

pub fn aggregate_zero_padding(prev: &GlobalLora, payloads: &[UploadPayload]) -> Result<GlobalLora> {
    let sorted = ordered_payloads(prev, payloads)?;
    let g = &prev.adapter;
    let mut acc = AggregationAccumulator::new(g.out_dim(), g.in_dim(), g.rank());
    for p in &sorted {
        for (pos, &j) in p.selected.iter().enumerate() {
            acc.add_scaled(p, pos, j, 1.0);
        }
    }
    // Divide once at the end so a lone contributor yields exactly column/|K|.
    let k = sorted.len() as f64;
    let mean = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) / k);
    Ok(GlobalLora {
        adapter: LoraAdapter::new(mean(&acc.sum_b), mean(&acc.sum_a), g.scale())?,
        round: prev.round + 1,
    })
}

/// Weighted mean of full-rank uploads; `weights[i]` belongs to `payloads[i]`.
pub fn aggregate_fedavg(
    prev: &GlobalLora,
    payloads: &[UploadPayload],
    weights: &[f64],
) -> Result<GlobalLora> {
    if weights.len() != payloads.len() {
        return Err(HaflError::shape(
            "fedavg weights",
            format!("{} weights", payloads.len()),
            format!("{} weights", weights.len()),
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(HaflError::InvalidArgument(
            "fedavg weights must be finite and >= 0".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(HaflError::InvalidArgument(
            "fedavg weights sum to zero".into(),
        ));
    }
    let sorted = ordered_payloads(prev, payloads)?;
    let r_g = prev.rank();
    let full: Vec<usize> = (0..r_g).collect();
    let g = &prev.adapter;
    let mut acc = AggregationAccumulator::new(g.out_dim(), g.in_dim(), r_g);
    for p in &sorted {
        if p.selected != full {
            return Err(HaflError::Protocol(format!(
                "fedavg needs full-rank uploads; client {} sent {} of {r_g} rank-1 terms",
                p.client_id,
                p.selected.len()
            )));
        }
        let idx = payloads
            .iter()
            .position(|q| q.client_id == p.client_id)
            .expect("payload came from this slice");
        let w = weights[idx] / total;
        for j in 0..r_g {
            acc.add_scaled(p, j, j, w);
        }
    }
    Ok(GlobalLora {
        adapter: LoraAdapter::new(acc.sum_b, acc.sum_a, g.scale())?,
        round: prev.round + 1,
    })
}

/// Dispatches on `policy.kind`. `weights` are only read by fedavg.
pub fn aggregate(
    policy: &AggregationPolicy,
    prev: &GlobalLora,
    payloads: &[UploadPayload],
    weights: &[f64],
) -> Result<GlobalLora> {
    match policy.kind {
        AggregationKind::Adaptive => aggregate_adaptive(prev, payloads, policy.stale_index_rule),
        AggregationKind::ZeroPadding => aggregate_zero_padding(prev, payloads),
        AggregationKind::Fedavg => aggregate_fedavg(prev, payloads, weights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn global(d: usize, l: usize, r: usize) -> GlobalLora {
        GlobalLora::new(
            LoraAdapter::new(
                Matrix::from_fn(d, r, |i, j| 1.0 + i as f64 + 10.0 * j as f64),
                Matrix::from_fn(r, l, |i, j| -1.0 - j as f64 - 10.0 * i as f64),
                1.0,
            )
            .unwrap(),
        )
    }

    fn payload(
        id: ClientId,
        selected: Vec<usize>,
        b: Matrix,
        a: Matrix,
        norm: f64,
    ) -> UploadPayload {
        UploadPayload {
            client_id: id,
            selected,
            b_cols: b,
            a_rows: a,
            norm_z: norm,
        }
    }

    #[test]
    fn single_full_payload_is_identity() {
        let prev = global(2, 3, 2);
        let up = payload(
            0,
            vec![0, 1],
            Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]),
            Matrix::from_rows(&[&[5.0, 6.0, 7.0], &[8.0, 9.0, 1.0]]),
            2.5,
        );
        let out = aggregate_adaptive(
            &prev,
            std::slice::from_ref(&up),
            StaleIndexRule::RetainPrevious,
        )
        .unwrap();
        assert_eq!(out.adapter.b(), &up.b_cols);
        assert_eq!(out.adapter.a(), &up.a_rows);
        assert_eq!(out.round, 1);
        let fed = aggregate_fedavg(&prev, std::slice::from_ref(&up), &[3.0]).unwrap();
        assert_eq!(fed.adapter.b(), &up.b_cols);
    }

    #[test]
    fn equal_norms_average_columns() {
        let prev = global(2, 2, 2);
        let p1 = payload(
            0,
            vec![1],
            Matrix::from_rows(&[&[1.0], &[3.0]]),
            Matrix::from_rows(&[&[2.0, 2.0]]),
            1.0,
        );
        let p2 = payload(
            1,
            vec![1],
            Matrix::from_rows(&[&[3.0], &[5.0]]),
            Matrix::from_rows(&[&[0.0, 4.0]]),
            1.0,
        );
        let out = aggregate_adaptive(&prev, &[p2, p1], StaleIndexRule::RetainPrevious).unwrap();
        assert_eq!(out.adapter.b().column(1), vec![2.0, 4.0]);
        assert_eq!(out.adapter.a().row(1), &[1.0, 3.0]);
        // index 0 untouched → retained
        assert_eq!(out.adapter.b().column(0), prev.adapter.b().column(0));
        assert_eq!(out.adapter.a().row(0), prev.adapter.a().row(0));
    }

    #[test]
    fn stale_zero_rule_clears_column() {
        let prev = global(2, 2, 2);
        let p = payload(
            4,
            vec![1],
            Matrix::from_rows(&[&[1.0], &[3.0]]),
            Matrix::from_rows(&[&[2.0, 2.0]]),
            1.0,
        );
        let out = aggregate_adaptive(&prev, &[p], StaleIndexRule::Zero).unwrap();
        assert_eq!(out.adapter.b().column(0), vec![0.0, 0.0]);
        assert_eq!(out.adapter.a().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn zero_padding_dilutes() {
        let prev = global(2, 2, 2);
        let mut payloads = vec![payload(
            0,
            vec![0],
            Matrix::from_rows(&[&[10.0], &[20.0]]),
            Matrix::from_rows(&[&[30.0, 40.0]]),
            1.0,
        )];
        for id in 1..10 {
            payloads.push(payload(
                id,
                vec![],
                Matrix::zeros(2, 0),
                Matrix::zeros(0, 2),
                0.0,
            ));
        }
        let out = aggregate_zero_padding(&prev, &payloads).unwrap();
        assert_eq!(out.adapter.b().column(0), vec![1.0, 2.0]);
        assert_eq!(out.adapter.a().row(0), &[3.0, 4.0]);
        assert_eq!(out.adapter.b().column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_norm_contributors_get_uniform_weights() {
        let prev = global(1, 1, 1);
        let p1 = payload(
            0,
            vec![0],
            Matrix::from_rows(&[&[2.0]]),
            Matrix::from_rows(&[&[0.0]]),
            0.0,
        );
        let p2 = payload(
            1,
            vec![0],
            Matrix::from_rows(&[&[4.0]]),
            Matrix::from_rows(&[&[0.0]]),
            0.0,
        );
        let out = aggregate_adaptive(&prev, &[p1, p2], StaleIndexRule::RetainPrevious).unwrap();
        assert_eq!(out.adapter.b().get(0, 0), 3.0);
    }

    #[test]
    fn protocol_errors() {
        let prev = global(1, 1, 2);
        let ok = payload(
            0,
            vec![0],
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[1.0]]),
            1.0,
        );
        let dup = ok.clone();
        assert!(matches!(
            aggregate_adaptive(&prev, &[ok.clone(), dup], StaleIndexRule::RetainPrevious),
            Err(HaflError::Protocol(_))
        ));
        let neg = payload(
            1,
            vec![0],
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[1.0]]),
            -1.0,
        );
        assert!(aggregate_adaptive(&prev, &[neg], StaleIndexRule::RetainPrevious).is_err());
        let oob = payload(
            2,
            vec![2],
            Matrix::from_rows(&[&[1.0]]),
            Matrix::from_rows(&[&[1.0]]),
            1.0,
        );
        assert!(matches!(
            aggregate_zero_padding(&prev, &[oob]),
            Err(HaflError::IndexOutOfRange { .. })
        ));
        assert!(aggregate_adaptive(&prev, &[], StaleIndexRule::RetainPrevious).is_err());
        assert!(
            aggregate_fedavg(&prev, &[ok], &[1.0]).is_err(),
            "rank mismatch"
        );
    }

    #[test]
    fn fedavg_weighted_mean() {
        let prev = global(1, 1, 1);
        let mk = |id, b: f64, a: f64| {
            payload(
                id,
                vec![0],
                Matrix::from_rows(&[&[b]]),
                Matrix::from_rows(&[&[a]]),
                1.0,
            )
        };
        let ups = vec![mk(0, 1.0, 4.0), mk(1, 2.0, 8.0), mk(2, 5.0, 0.0)];
        let out = aggregate_fedavg(&prev, &ups, &[1.0, 2.0, 1.0]).unwrap();
        assert!((out.adapter.b().get(0, 0) - (1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-15);
        assert!((out.adapter.a().get(0, 0) - (4.0 + 16.0) / 4.0).abs() < 1e-15);

        let sym = vec![mk(0, 3.0, 1.0), mk(1, -3.0, 1.0)];
        let out = aggregate_fedavg(&prev, &sym, &[1.0, 1.0]).unwrap();
        assert_eq!(out.adapter.b().get(0, 0), 0.0);
    }
}
