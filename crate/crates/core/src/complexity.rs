//! Weight accounting and a per-patch energy estimate.
//!
//! Each surviving weight costs one multiply and one add per patch. A binarized
//! weight costs one add (or subtract) and no multiply. Biases, pooling and
//! activations are not counted. Energies are kept in integer femtojoules so sums
//! of per-operation costs are exact.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NetworkSpec, Network, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerCompression {
    Full,
    Quantized,
    Pruned { survivors: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    /// 1-based position among all layers of the network.
    pub layer: usize,
    pub kind: String,
    /// Neurons or filters.
    pub units: usize,
    pub full_precision_weights: usize,
    /// Weights left after pruning (all weights when unpruned).
    pub pruned_survivors: usize,
    pub thirty_two_bit_weights: usize,
    pub one_bit_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub rows: Vec<LayerCount>,
    pub total_full_precision: usize,
    pub total_thirty_two_bit: usize,
    pub total_one_bit: usize,
}

impl ComplexityReport {
    fn from_rows(rows: Vec<LayerCount>) -> Self {
        ComplexityReport {
            total_full_precision: rows.iter().map(|r| r.full_precision_weights).sum(),
            total_thirty_two_bit: rows.iter().map(|r| r.thirty_two_bit_weights).sum(),
            total_one_bit: rows.iter().map(|r| r.one_bit_weights).sum(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Layer | Type | Neurons/Filters | Full precision weights | Simplified weights | 32-bit | 1-bit |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.layer,
                r.kind,
                r.units,
                r.full_precision_weights,
                r.pruned_survivors,
                r.thirty_two_bit_weights,
                r.one_bit_weights
            );
        }
        let _ = writeln!(
            s,
            "| Total | | | {} | {} | {} | {} |",
            self.total_full_precision,
            self.total_thirty_two_bit + self.total_one_bit,
            self.total_thirty_two_bit,
            self.total_one_bit
        );
        s
    }
}

fn units(l: &LayerSpec) -> usize {
    match *l {
        LayerSpec::Dense { outputs, .. } => outputs,
        LayerSpec::Conv { out_channels, .. } => out_channels,
        _ => 0,
    }
}

/// Counts for `spec` with one compression entry per dense/conv layer.
pub fn count_params_spec(spec: &NetworkSpec, compression: &[LayerCompression]) -> Result<ComplexityReport> {
    let weighted: Vec<(usize, &LayerSpec)> =
        spec.layers.iter().enumerate().filter(|(_, l)| l.is_weighted()).collect();
    if weighted.len() != compression.len() {
        return Err(Error::Config(format!(
            "{} compression entries for {} weighted layers",
            compression.len(),
            weighted.len()
        )));
    }
    let mut rows = Vec::with_capacity(weighted.len());
    for ((i, l), c) in weighted.into_iter().zip(compression) {
        let n = l.weight_count();
        let (kept, one_bit) = match *c {
            LayerCompression::Full => (n, false),
            LayerCompression::Quantized => (n, true),
            LayerCompression::Pruned { survivors } => {
                if survivors > n {
                    return Err(Error::Config(format!("{survivors} survivors exceed {n} weights in layer {}", i + 1)));
                }
                (survivors, false)
            }
        };
        rows.push(LayerCount {
            layer: i + 1,
            kind: l.kind().to_string(),
            units: units(l),
            full_precision_weights: n,
            pruned_survivors: kept,
            thirty_two_bit_weights: if one_bit { 0 } else { kept },
            one_bit_weights: if one_bit { kept } else { 0 },
        });
    }
    Ok(ComplexityReport::from_rows(rows))
}

/// Counts for a network as trained: quantized layers are 1-bit, masks give survivors.
pub fn count_params<T: Real>(net: &Network<T>) -> ComplexityReport {
    let compression: Vec<LayerCompression> = net
        .layers
        .iter()
        .filter_map(|l| l.weights())
        .map(|w| {
            if w.quantized {
                LayerCompression::Quantized
            } else if w.mask.is_some() {
                LayerCompression::Pruned { survivors: w.survivors() }
            } else {
                LayerCompression::Full
            }
        })
        .collect();
    count_params_spec(net.spec(), &compression).expect("one entry per weighted layer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NumFormat {
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "int32")]
    Int32,
    #[serde(rename = "float16")]
    Float16,
    #[serde(rename = "float32")]
    Float32,
}

impl std::str::FromStr for NumFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(NumFormat::Int8),
            "int32" => Ok(NumFormat::Int32),
            "float16" => Ok(NumFormat::Float16),
            "float32" => Ok(NumFormat::Float32),
            _ => Err(Error::Config(format!("unknown number format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCost {
    pub format: NumFormat,
    pub multiply_fj: u64,
    pub add_fj: u64,
}

/// Energy per operation and number format, in femtojoules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub name: String,
    pub costs: Vec<OpCost>,
}

impl Default for EnergyModel {
    /// Rough 45 nm costs: 8-bit int 0.2/0.03 pJ, 32-bit int 3.1/0.1 pJ,
    /// 16-bit float 1.1/0.4 pJ, 32-bit float 3.7/0.9 pJ (multiply/add).
    fn default() -> Self {
        let c = |format, multiply_fj, add_fj| OpCost { format, multiply_fj, add_fj };
        EnergyModel {
            name: "45nm".into(),
            costs: vec![
                c(NumFormat::Int8, 200, 30),
                c(NumFormat::Int32, 3100, 100),
                c(NumFormat::Float16, 1100, 400),
                c(NumFormat::Float32, 3700, 900),
            ],
        }
    }
}

/// JSON form accepted for user models: costs in picojoules.
#[derive(Debug, Deserialize)]
struct EnergyModelJson {
    name: String,
    costs: Vec<OpCostJson>,
}

#[derive(Debug, Deserialize)]
struct OpCostJson {
    format: NumFormat,
    multiply_pj: f64,
    add_pj: f64,
}

fn pj_to_fj(pj: f64) -> Result<u64> {
    let fj = pj * 1000.0;
    if !(fj > 0.0) || !fj.is_finite() || (fj - fj.round()).abs() > 1e-6 {
        return Err(Error::Config(format!("energy {pj} pJ must be positive with at most femtojoule resolution")));
    }
    Ok(fj.round() as u64)
}

impl EnergyModel {
    /// Parses `{"name": .., "costs": [{"format": "float32", "multiply_pj": 3.7, "add_pj": 0.9}, ..]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: EnergyModelJson = serde_json::from_str(text).map_err(|e| Error::Config(format!("energy model: {e}")))?;
        let costs = raw
            .costs
            .iter()
            .map(|c| Ok(OpCost { format: c.format, multiply_fj: pj_to_fj(c.multiply_pj)?, add_fj: pj_to_fj(c.add_pj)? }))
            .collect::<Result<Vec<_>>>()?;
        let model = EnergyModel { name: raw.name, costs };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.costs.iter().any(|c| c.multiply_fj == 0 || c.add_fj == 0) {
            return Err(Error::Config("energy costs must be positive".into()));
        }
        Ok(())
    }

    pub fn cost(&self, format: NumFormat) -> Result<OpCost> {
        self.costs
            .iter()
            .find(|c| c.format == format)
            .copied()
            .ok_or_else(|| Error::Config(format!("energy model {} has no {format:?} costs", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: usize,
    pub multiplies: u64,
    pub adds: u64,
    pub multiply_fj: u64,
    pub add_fj: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub model: String,
    pub format: NumFormat,
    pub layers: Vec<LayerEnergy>,
    pub multiply_fj: u64,
    pub add_fj: u64,
    pub total_fj: u64,
    /// `total_fj / 1000`.
    pub total_pj: f64,
}

/// Energy of one patch inference with full-precision arithmetic in `format`.
pub fn estimate_energy(report: &ComplexityReport, model: &EnergyModel, format: NumFormat) -> Result<EnergyEstimate> {
    let cost = model.cost(format)?;
    let layers: Vec<LayerEnergy> = report
        .rows
        .iter()
        .map(|r| {
            let multiplies = r.thirty_two_bit_weights as u64;
            let adds = (r.thirty_two_bit_weights + r.one_bit_weights) as u64;
            LayerEnergy {
                layer: r.layer,
                multiplies,
                adds,
                multiply_fj: multiplies * cost.multiply_fj,
                add_fj: adds * cost.add_fj,
            }
        })
        .collect();
    let multiply_fj = layers.iter().map(|l| l.multiply_fj).sum();
    let add_fj = layers.iter().map(|l| l.add_fj).sum();
    let total_fj = multiply_fj + add_fj;
    Ok(EnergyEstimate {
        model: model.name.clone(),
        format,
        layers,
        multiply_fj,
        add_fj,
        total_fj,
        total_pj: total_fj as f64 / 1000.0,
    })
}

impl EnergyEstimate {
    pub fn to_markdown(&self) -> String {
        let mut s = format!("Energy per patch ({}, {:?}): {} pJ\n\n", self.model, self.format, self.total_pj);
        s.push_str("| Layer | Multiplies | Adds | Multiply pJ | Add pJ |\n|---|---|---|---|---|\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                l.layer,
                l.multiplies,
                l.adds,
                l.multiply_fj as f64 / 1000.0,
                l.add_fj as f64 / 1000.0
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, InputShape};

    #[test]
    fn two_by_two_dense_layer_energy() {
        let spec = NetworkSpec::new(
            InputShape { channels: 1, height: 1, width: 2 },
            vec![LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity }, LayerSpec::Softmax],
        )
        .unwrap();
        let r = count_params_spec(&spec, &[LayerCompression::Full]).unwrap();
        let e = estimate_energy(&r, &EnergyModel::default(), NumFormat::Float32).unwrap();
        assert_eq!(e.total_fj, 4 * 3700 + 4 * 900);
        let q = count_params_spec(&spec, &[LayerCompression::Quantized]).unwrap();
        let e = estimate_energy(&q, &EnergyModel::default(), NumFormat::Float32).unwrap();
        assert_eq!(e.multiply_fj, 0);
        assert_eq!(e.add_fj, 4 * 900);
    }

    #[test]
    fn json_model_round_trips_table_values() {
        let text = r#"{"name":"t","costs":[{"format":"float32","multiply_pj":3.7,"add_pj":0.9},
            {"format":"int8","multiply_pj":0.2,"add_pj":0.03}]}"#;
        let m = EnergyModel::from_json(text).unwrap();
        assert_eq!(m.cost(NumFormat::Float32).unwrap().multiply_fj, 3700);
        assert_eq!(m.cost(NumFormat::Int8).unwrap().add_fj, 30);
        assert!(m.cost(NumFormat::Float16).is_err());
        assert!(EnergyModel::from_json(r#"{"name":"z","costs":[{"format":"int8","multiply_pj":0,"add_pj":1}]}"#).is_err());
    }

    #[test]
    fn survivors_cannot_exceed_weights() {
        let spec = crate::nn::cnn_spec();
        let c = [
            LayerCompression::Pruned { survivors: 2000 },
            LayerCompression::Full,
            LayerCompression::Full,
            LayerCompression::Full,
            LayerCompression::Full,
        ];
        assert!(count_params_spec(&spec, &c).is_err());
    }
}
