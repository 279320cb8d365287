//! Teacher-versus-student comparison written as JSON plus two CSV tables.
//!
//! `<stem>.csv` has the columns of [`SUMMARY_COLUMNS`], one row per metric;
//! `<stem>.layers.csv` has one row per model and layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{CostReport, EvalReport};
use crate::error::{invalid, Result};

use super::{write_atomic, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub cost: CostReport,
    pub eval: EvalReport,
}

/// Student relative to teacher. Ratios are student over teacher; the
/// non-exempt variants sum only layers the student quantizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// `student − teacher` mAP50.
    pub map50_gap: f64,
    pub bops_ratio: f64,
    pub param_ratio: f64,
    pub bops_ratio_non_exempt: f64,
    pub param_ratio_non_exempt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub teacher: ModelReport,
    pub student: ModelReport,
    pub deltas: Deltas,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

impl ComparisonReport {
    pub fn new(teacher: ModelReport, student: ModelReport) -> Result<Self> {
        let (t, s) = (&teacher.cost.per_layer, &student.cost.per_layer);
        if t.len() != s.len() || t.iter().zip(s).any(|(a, b)| a.name != b.name) {
            return invalid("teacher and student cost reports cover different layers");
        }
        let quantized = |f: &dyn Fn(&crate::cost::LayerCost) -> u64, from_student: bool| -> u64 {
            s.iter()
                .zip(t)
                .filter(|(sl, _)| !sl.exempt)
                .map(|(sl, tl)| if from_student { f(sl) } else { f(tl) })
                .sum()
        };
        let deltas = Deltas {
            map50_gap: student.eval.map50 - teacher.eval.map50,
            bops_ratio: ratio(student.cost.total_bops, teacher.cost.total_bops),
            param_ratio: ratio(student.cost.total_param_bits, teacher.cost.total_param_bits),
            bops_ratio_non_exempt: ratio(quantized(&|c| c.bops, true), quantized(&|c| c.bops, false)),
            param_ratio_non_exempt: ratio(
                quantized(&|c| c.param_bits, true),
                quantized(&|c| c.param_bits, false),
            ),
        };
        Ok(Self {
            teacher,
            student,
            deltas,
        })
    }

    /// Rows of the summary table in [`SUMMARY_COLUMNS`] order.
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        let (t, s) = (&self.teacher, &self.student);
        let mut rows = vec![
            SummaryRow::new("mAP50", t.eval.map50, s.eval.map50),
            SummaryRow::new("total_bops", t.cost.total_bops as f64, s.cost.total_bops as f64),
            SummaryRow::new("gbops", t.cost.gbops, s.cost.gbops),
            SummaryRow::new(
                "total_param_bits",
                t.cost.total_param_bits as f64,
                s.cost.total_param_bits as f64,
            ),
            SummaryRow::new("total_param_bytes", t.cost.total_param_bytes, s.cost.total_param_bytes),
            SummaryRow::new("params_mb", t.cost.params_mb, s.cost.params_mb),
            SummaryRow::new("params_mib", t.cost.params_mib, s.cost.params_mib),
            SummaryRow::new(
                "bops_ratio_vs_fp32",
                t.cost.compression_vs_fp32.bops_ratio,
                s.cost.compression_vs_fp32.bops_ratio,
            ),
            SummaryRow::new(
                "bops_ratio_non_exempt_vs_fp32",
                t.cost.compression_vs_fp32.bops_ratio_non_exempt,
                s.cost.compression_vs_fp32.bops_ratio_non_exempt,
            ),
            SummaryRow::new(
                "params_ratio_vs_fp32",
                t.cost.compression_vs_fp32.params_ratio,
                s.cost.compression_vs_fp32.params_ratio,
            ),
            SummaryRow::new(
                "params_ratio_non_exempt_vs_fp32",
                t.cost.compression_vs_fp32.params_ratio_non_exempt,
                s.cost.compression_vs_fp32.params_ratio_non_exempt,
            ),
        ];
        for (class, ap) in &t.eval.per_class_ap {
            let sap = s.eval.per_class_ap.get(class).copied().unwrap_or(0.0);
            rows.push(SummaryRow::new(&format!("ap_class_{class}"), *ap, sap));
        }
        rows
    }
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["metric", "teacher", "student", "student_minus_teacher", "student_over_teacher"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub teacher: f64,
    pub student: f64,
    pub student_minus_teacher: f64,
    pub student_over_teacher: f64,
}

impl SummaryRow {
    fn new(metric: &str, teacher: f64, student: f64) -> Self {
        Self {
            metric: metric.to_string(),
            teacher,
            student,
            student_minus_teacher: student - teacher,
            student_over_teacher: if teacher == 0.0 && student == 0.0 { 1.0 } else { student / teacher },
        }
    }
}

#[derive(Serialize)]
struct LayerRow<'a> {
    model: &'a str,
    layer: &'a str,
    b_w: u64,
    b_a_prev: u64,
    bops: u64,
    fp32_bops: u64,
    param_bits: u64,
    param_bytes: f64,
    exempt: bool,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
}

/// Writes `report` to `path` (JSON), `<stem>.csv` and `<stem>.layers.csv`.
/// Returns the paths written.
pub fn emit_report(report: &ComparisonReport, path: &Path) -> Result<Vec<PathBuf>> {
    write_json(path, report)?;
    let summary = sibling(path, ".csv");
    write_atomic(&summary, &csv_bytes(&report.summary_rows())?)?;
    let mut layers = Vec::new();
    for (model, r) in [("teacher", &report.teacher), ("student", &report.student)] {
        layers.extend(r.cost.per_layer.iter().map(|c| LayerRow {
            model,
            layer: &c.name,
            b_w: c.b_w,
            b_a_prev: c.b_a_prev,
            bops: c.bops,
            fp32_bops: c.fp32_bops,
            param_bits: c.param_bits,
            param_bytes: c.param_bytes,
            exempt: c.exempt,
        }));
    }
    let layer_path = sibling(path, ".layers.csv");
    write_atomic(&layer_path, &csv_bytes(&layers)?)?;
    Ok(vec![path.to_path_buf(), summary, layer_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitsearch::BitPlan;
    use crate::cost::{cost_report, evaluate, BBox, Detection, GroundTruth};
    use crate::net::NetworkSpec;

    fn model(plan: &BitPlan, spec: &NetworkSpec, confidence_gap: bool) -> ModelReport {
        let gts = vec![
            GroundTruth {
                image: 0,
                class: 0,
                bbox: BBox::new(0.0, 0.0, 0.5, 0.5),
            },
            GroundTruth {
                image: 0,
                class: 1,
                bbox: BBox::new(0.5, 0.5, 1.0, 1.0),
            },
        ];
        let mut dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                image: 0,
                class: g.class,
                confidence: 0.9,
                bbox: g.bbox,
            })
            .collect();
        if confidence_gap {
            dets[1].bbox = BBox::new(0.0, 0.5, 0.1, 0.6);
        }
        ModelReport {
            cost: cost_report(spec, plan).unwrap(),
            eval: evaluate(&dets, &gts, 2, 0.5).unwrap(),
        }
    }

    #[test]
    fn identical_inputs_give_unit_ratios() {
        let spec = NetworkSpec::tiny_detector(2);
        let plan = BitPlan::uniform(&spec, 4, true).unwrap();
        let m = model(&plan, &spec, false);
        let r = ComparisonReport::new(m.clone(), m).unwrap();
        assert_eq!(
            r.deltas,
            Deltas {
                map50_gap: 0.0,
                bops_ratio: 1.0,
                param_ratio: 1.0,
                bops_ratio_non_exempt: 1.0,
                param_ratio_non_exempt: 1.0,
            }
        );
        assert!(r.summary_rows().iter().all(|row| row.student_minus_teacher == 0.0 && row.student_over_teacher == 1.0));
    }

    #[test]
    fn eight_bit_student_against_fp_teacher() {
        let spec = NetworkSpec::tiny_detector(2);
        let teacher = model(&BitPlan::full_precision(&spec), &spec, false);
        let student = model(&BitPlan::uniform(&spec, 8, false).unwrap(), &spec, true);
        let r = ComparisonReport::new(teacher, student).unwrap();
        assert_eq!(r.deltas.bops_ratio_non_exempt, 1.0 / 16.0);
        assert_eq!(r.deltas.param_ratio_non_exempt, 0.25);
        assert_eq!(r.deltas.map50_gap, -0.5);
    }

    #[test]
    fn csv_matches_json() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::tiny_detector(2);
        let teacher = model(&BitPlan::full_precision(&spec), &spec, false);
        let student = model(&BitPlan::uniform(&spec, 3, true).unwrap(), &spec, true);
        let r = ComparisonReport::new(teacher, student).unwrap();
        let paths = emit_report(&r, &dir.path().join("report.json")).unwrap();
        let json: ComparisonReport = serde_json::from_slice(&std::fs::read(&paths[0]).unwrap()).unwrap();
        assert_eq!(json, r);
        let mut rd = csv::Reader::from_path(&paths[1]).unwrap();
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), SUMMARY_COLUMNS);
        let rows: Vec<SummaryRow> = rd.deserialize().map(|x| x.unwrap()).collect();
        assert_eq!(rows, json.summary_rows());
        assert_eq!(rows[1].student, json.student.cost.total_bops as f64);
        assert_eq!(rows[8].student, json.student.cost.compression_vs_fp32.bops_ratio_non_exempt);
    }
}
