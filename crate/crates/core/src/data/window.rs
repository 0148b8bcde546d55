use ndarray::Array2;

use crate::{Error, Result};

pub const NORMAL_TAG: &str = "normal";
pub const COE_TAG: &str = "synthetic-coe";
pub const WMIX_TAG: &str = "synthetic-wmix";

/// One time interval: `K` variables by `L` timestamps, with a (possibly
/// soft) anomaly label and the class it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub id: String,
    pub values: Array2<f32>,
    pub label: f64,
    pub class_tag: String,
}

impl SampleWindow {
    pub fn new(
        id: impl Into<String>,
        values: Array2<f32>,
        label: f64,
        class_tag: impl Into<String>,
    ) -> Result<Self> {
        let w = SampleWindow {
            id: id.into(),
            values,
            label,
            class_tag: class_tag.into(),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn normal(id: impl Into<String>, values: Array2<f32>) -> Result<Self> {
        Self::new(id, values, 0.0, NORMAL_TAG)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Sample {
            sample: self.id.clone(),
            msg,
        };
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        if !(0.0..=1.0).contains(&self.label) {
            return Err(fail(format!("label {} outside [0, 1]", self.label)));
        }
        let is_normal_tag = self.class_tag == NORMAL_TAG;
        if (self.label == 0.0) != is_normal_tag {
            return Err(fail(format!(
                "label {} inconsistent with class tag {:?}",
                self.label, self.class_tag
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn l(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_normal(&self) -> bool {
        self.label == 0.0
    }

    /// Binary evaluation label: any anomaly presence counts as positive.
    pub fn is_anomalous(&self) -> bool {
        self.label > 0.0
    }

    pub(crate) fn check_shape(&self, k: usize, l: usize) -> Result<()> {
        if self.values.dim() != (k, l) {
            return Err(Error::Sample {
                sample: self.id.clone(),
                msg: format!(
                    "shape mismatch: expected {k}x{l}, got {}x{}",
                    self.k(),
                    self.l()
                ),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_and_tag_must_agree() {
        let x = Array2::zeros((2, 3));
        assert!(SampleWindow::new("a", x.clone(), 0.0, "normal").is_ok());
        assert!(SampleWindow::new("a", x.clone(), 0.0, "spike").is_err());
        assert!(SampleWindow::new("a", x.clone(), 1.0, "normal").is_err());
        assert!(SampleWindow::new("a", x.clone(), 0.3, "synthetic-wmix").is_ok());
        assert!(SampleWindow::new("a", x, 1.5, "spike").is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = Array2::zeros((2, 3));
        x[[1, 2]] = f32::NAN;
        let err = SampleWindow::normal("w7", x).unwrap_err();
        assert!(err.to_string().contains("w7"));
    }
}
