use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Supervision attached to one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Target(Vec<f64>),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Target(_) => None,
        }
    }
}

/// Which space the vectors of a [`LabeledSet`] live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Input,
    Feature,
}

/// Samples stored row-wise with one label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    inputs: Matrix,
    labels: Vec<Label>,
    space: Space,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<Label>, space: Space) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        let mut target_len = None;
        let mut has_class = false;
        for l in &labels {
            match l {
                Label::Class(_) => has_class = true,
                Label::Target(t) => {
                    if *target_len.get_or_insert(t.len()) != t.len() {
                        return Err(Error::Shape("ragged target labels".into()));
                    }
                }
            }
        }
        if has_class && target_len.is_some() {
            return Err(Error::Shape("mixed class and target labels".into()));
        }
        Ok(Self {
            inputs,
            labels,
            space,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<Label>, space: Space) -> Result<Self> {
        if rows.is_empty() {
            return Self::new(Matrix::zeros(0, 0), labels, space);
        }
        Self::new(Matrix::from_rows(rows)?, labels, space)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &Label {
        &self.labels[i]
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &Label)> + '_ {
        (0..self.len()).map(move |i| (self.input(i), &self.labels[i]))
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("row {i} of {}", self.len())));
            }
            data.extend_from_slice(self.input(i));
            labels.push(self.labels[i].clone());
        }
        Ok(Self {
            inputs: Matrix::new(indices.len(), dim, data)?,
            labels,
            space: self.space,
        })
    }

    /// Same labels, new vectors (e.g. features computed from inputs).
    pub fn with_inputs(&self, inputs: Matrix, space: Space) -> Result<Self> {
        Self::new(inputs, self.labels.clone(), space)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &LabeledSet) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::Shape(format!(
                "cannot concatenate dims {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let dim = self.dim().max(other.dim());
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        Self::new(Matrix::new(labels.len(), dim, data)?, labels, self.space)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        let x = Matrix::zeros(2, 3);
        assert!(LabeledSet::new(x, vec![Label::Class(0)], Space::Input).is_err());
    }

    #[test]
    fn rejects_mixed_labels() {
        let x = Matrix::zeros(2, 1);
        let labels = vec![Label::Class(0), Label::Target(vec![1.0])];
        assert!(LabeledSet::new(x, labels, Space::Input).is_err());
    }

    #[test]
    fn subset_and_concat() {
        let s = LabeledSet::from_rows(
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            vec![Label::Class(0), Label::Class(1), Label::Class(0)],
            Space::Input,
        )
        .unwrap();
        let t = s.subset(&[2, 0]).unwrap();
        assert_eq!(t.input(0), &[5.0, 6.0]);
        assert_eq!(t.label(1), &Label::Class(0));
        let u = s.concat(&t).unwrap();
        assert_eq!(u.len(), 5);
        assert_eq!(u.input(3), &[5.0, 6.0]);
        assert!(s.subset(&[3]).is_err());
    }

    #[test]
    fn label_json_is_untagged() {
        assert_eq!(serde_json::to_string(&Label::Class(2)).unwrap(), "2");
        let t: Label = serde_json::from_str("[1.0,-1.0]").unwrap();
        assert_eq!(t, Label::Target(vec![1.0, -1.0]));
    }
}
