use crate::error::{CoreError, Result};

/// Index of a parameter inside a [`ParamSet`].
pub type ParamId = usize;

/// One trainable tensor plus its gradient and optimizer moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: (usize, usize),
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) moment1: Vec<f64>,
    pub(crate) moment2: Vec<f64>,
}

/// Flat collection of named parameters; the unit the optimizer steps.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    pub(crate) step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: (usize, usize), values: Vec<f64>) -> Result<ParamId> {
        if values.len() != shape.0 * shape.1 {
            return Err(CoreError::Shape(format!(
                "parameter '{name}': {}x{} needs {} values, got {}",
                shape.0,
                shape.1,
                shape.0 * shape.1,
                values.len()
            )));
        }
        let n = values.len();
        self.params.push(Parameter {
            name: name.to_string(),
            shape,
            values,
            grad: vec![0.0; n],
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
        });
        Ok(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}
