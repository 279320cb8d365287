use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Map;
use sha2::{Digest, Sha256};

use crate::bitsearch::BitPlan;
use crate::error::{CheckpointError, Result};
use crate::net::NetworkSpec;
use crate::scm::GateParams;
use crate::tensor::Tensor;
use crate::train::data::{BoxLabel, Dataset, DatasetParams, Scene};
use crate::train::{GateTelemetry, ModelParams};

use super::container::{self, Decoded};
use super::{read_input, write_atomic};

/// A trained network: spec, weights and, for students, the plan and gate state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ModelParams,
    pub bitplan: Option<BitPlan>,
    pub gate: Option<GateParams>,
    pub telemetry: Option<GateTelemetry>,
}

#[derive(Serialize, Deserialize)]
struct GateHeader {
    d_embed: usize,
    tau: f64,
    off_logit: f64,
    scales: usize,
}

impl Checkpoint {
    pub fn teacher(spec: NetworkSpec, params: ModelParams) -> Self {
        Self {
            spec,
            params,
            bitplan: None,
            gate: None,
            telemetry: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_against(&self.spec)?;
        let mut fields = Map::new();
        fields.insert("kind".into(), "checkpoint".into());
        fields.insert("spec".into(), serde_json::to_value(&self.spec)?);
        if let Some(plan) = &self.bitplan {
            fields.insert("bitplan".into(), serde_json::to_value(plan)?);
        }
        if let Some(t) = &self.telemetry {
            fields.insert("telemetry".into(), serde_json::to_value(t)?);
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.named(&self.spec);
        if let Some(g) = &self.gate {
            let header = GateHeader {
                d_embed: g.d_embed,
                tau: g.tau,
                off_logit: g.off_logit,
                scales: g.scales(),
            };
            fields.insert("gate".into(), serde_json::to_value(header)?);
            for (i, (t, s)) in g.proj_teacher.iter().zip(&g.proj_student).enumerate() {
                tensors.push((format!("gate.teacher.{i}"), t));
                tensors.push((format!("gate.student.{i}"), s));
            }
        }
        container::encode(fields, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = container::decode(bytes)?;
        let spec: NetworkSpec = d.required("spec")?;
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            weights.push(d.take(&format!("{}.weight", l.name))?);
            biases.push(d.take(&format!("{}.bias", l.name))?);
        }
        let params = ModelParams { weights, biases };
        params.check_against(&spec)?;
        let bitplan: Option<BitPlan> = d.field("bitplan")?;
        if let Some(p) = &bitplan {
            p.check_against(&spec)?;
        }
        let gate = match d.field::<GateHeader>("gate")? {
            None => None,
            Some(h) => Some(take_gate(&mut d, h)?),
        };
        Ok(Self {
            telemetry: d.field("telemetry")?,
            spec,
            params,
            bitplan,
            gate,
        })
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn take_gate(d: &mut Decoded, h: GateHeader) -> Result<GateParams, CheckpointError> {
    let mut proj_teacher = Vec::with_capacity(h.scales);
    let mut proj_student = Vec::with_capacity(h.scales);
    for i in 0..h.scales {
        proj_teacher.push(d.take(&format!("gate.teacher.{i}"))?);
        proj_student.push(d.take(&format!("gate.student.{i}"))?);
    }
    Ok(GateParams {
        proj_teacher,
        proj_student,
        d_embed: h.d_embed,
        tau: h.tau,
        off_logit: h.off_logit,
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_input(path)?)
}

pub fn dataset_to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut fields = Map::new();
    fields.insert("kind".into(), "dataset".into());
    fields.insert("params".into(), serde_json::to_value(dataset.params)?);
    let labels: Vec<&Vec<BoxLabel>> = dataset.scenes.iter().map(|s| &s.boxes).collect();
    fields.insert("labels".into(), serde_json::to_value(labels)?);
    let tensors: Vec<(String, &Tensor)> = dataset
        .scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("image.{i}"), &s.image))
        .collect();
    container::encode(fields, &tensors)
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut d = container::decode(bytes)?;
    let params: DatasetParams = d.required("params")?;
    let labels: Vec<Vec<BoxLabel>> = d.required("labels")?;
    let scenes = labels
        .into_iter()
        .enumerate()
        .map(|(i, boxes)| {
            Ok(Scene {
                image: d.take(&format!("image.{i}"))?,
                boxes,
            })
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    Ok(Dataset { params, scenes })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(dataset)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&read_input(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::gen_synthetic_dataset;

    fn student() -> Checkpoint {
        let spec = NetworkSpec::tiny_detector(2);
        let params = ModelParams::init(&spec, 4).unwrap();
        let mut plan = BitPlan::uniform(&spec, 5, true).unwrap();
        plan.layers[2].distances.insert(5, 0.125);
        plan.layers[3].fallback = true;
        let gate = GateParams::init(&spec.tap_channels(), 8, 0.5, 0.0, 1).unwrap();
        Checkpoint {
            spec,
            params,
            bitplan: Some(plan),
            gate: Some(gate),
            telemetry: Some(GateTelemetry::default()),
        }
    }

    #[test]
    fn round_trip_with_plan_and_gate() {
        let c = student();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.bitplan, c.bitplan);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn dataset_round_trip() {
        let d = gen_synthetic_dataset(DatasetParams::new(6, 3, 9)).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), d);
        assert_eq!(dataset_to_bytes(&d).unwrap(), bytes);
    }

    #[test]
    fn missing_tensor_is_reported() {
        let c = Checkpoint::teacher(NetworkSpec::tiny_detector(2), ModelParams::init(&NetworkSpec::tiny_detector(2), 0).unwrap());
        let mut other = c.clone();
        other.spec.layers[0].name = "renamed".into();
        let bytes = c.to_bytes().unwrap();
        let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + n]).unwrap();
        header["spec"] = serde_json::to_value(&other.spec).unwrap();
        let h = serde_json::to_vec(&header).unwrap();
        let mut edited = (h.len() as u32).to_le_bytes().to_vec();
        edited.extend(h);
        edited.extend_from_slice(&bytes[4 + n..]);
        assert!(matches!(
            Checkpoint::from_bytes(&edited),
            Err(crate::Error::Checkpoint(CheckpointError::MissingTensor(_)))
        ));
    }
}
