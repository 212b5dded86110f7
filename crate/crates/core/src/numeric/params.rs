use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Canonical ordering of a network's parameters: layers in order,
/// weight before bias.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let idx = self.entries.len();
        let entry = ParamEntry {
            name,
            shape,
            offset: self.total,
        };
        self.total += entry.len();
        self.entries.push(entry);
        idx
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

macro_rules! flat_params {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            layout: Arc<ParamLayout>,
            values: Vec<T>,
        }

        impl<T: Scalar> $name<T> {
            pub fn new(layout: Arc<ParamLayout>, values: Vec<T>) -> Result<Self> {
                if layout.total() != values.len() {
                    return Err(Error::ParamMismatch(format!(
                        "layout holds {} values, got {}",
                        layout.total(),
                        values.len()
                    )));
                }
                Ok(Self { layout, values })
            }

            pub fn zeros(layout: Arc<ParamLayout>) -> Self {
                let values = vec![T::zero(); layout.total()];
                Self { layout, values }
            }

            pub fn layout(&self) -> &Arc<ParamLayout> {
                &self.layout
            }

            pub fn values(&self) -> &[T] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [T] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<T> {
                self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            /// The slice belonging to parameter `idx` of the layout.
            pub fn block(&self, idx: usize) -> &[T] {
                &self.values[self.layout.entries()[idx].range()]
            }

            pub fn blocks(&self) -> impl Iterator<Item = (&ParamEntry, &[T])> {
                self.layout
                    .entries()
                    .iter()
                    .map(move |e| (e, &self.values[e.range()]))
            }
        }
    };
}

flat_params!(
    /// Flat, canonically ordered parameter values of a network; the unit
    /// exchanged with the server.
    ParameterVector
);
flat_params!(
    /// Per-parameter gradients, aligned with a [`ParameterVector`] layout.
    Gradients
);

/// In-place `p <- p - lr * g`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ParamMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

impl<T: Scalar> ParameterVector<T> {
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        if grads.layout() != self.layout() {
            return Err(Error::ParamMismatch("gradient layout differs".into()));
        }
        sgd_step(&mut self.values, grads.values(), lr)
    }
}
