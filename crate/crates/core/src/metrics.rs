//! Intersection-over-union evaluation and teacher/student class comparison.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::IGNORE_LABEL;

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Accumulates intersections and unions over every pixel of `pred` and
/// `gt`; ignore pixels in `gt` are skipped.
pub fn evaluate_miou(pred: &[u8], gt: &[u8], classes: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", pred.len(), gt.len())));
    }
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if g >= classes {
            return Err(Error::InvalidLabel { label: g as u8, classes });
        }
        if p == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            if p < classes {
                union[p] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    Ok(MiouReport {
        miou: mean_present(&per_class),
        per_class,
    })
}

/// Mean over the entries that are present.
pub fn mean_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassComparison {
    pub class: usize,
    pub teacher_iou: f64,
    pub student_iou: f64,
    pub delta: f64,
}

/// Classes on which the student's IoU exceeds the teacher's, sorted by
/// the margin, largest first (ties by class id).
pub fn per_class_comparison(teacher: &[Option<f64>], student: &[Option<f64>]) -> Result<Vec<ClassComparison>> {
    if teacher.len() != student.len() {
        return Err(Error::Report(format!(
            "teacher reports {} classes, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut rows: Vec<ClassComparison> = teacher
        .iter()
        .zip(student)
        .enumerate()
        .filter_map(|(class, (t, s))| match (t, s) {
            (Some(t), Some(s)) if s > t => Some(ClassComparison {
                class,
                teacher_iou: *t,
                student_iou: *s,
                delta: s - t,
            }),
            _ => None,
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.class.cmp(&b.class)));
    Ok(rows)
}

pub fn comparison_csv(rows: &[ClassComparison]) -> String {
    let mut s = String::from("class,teacher_iou,student_iou,delta\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.16e},{:.16e},{:.16e}", r.class, r.teacher_iou, r.student_iou, r.delta);
    }
    s
}
