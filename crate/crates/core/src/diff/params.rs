use std::ops::Range;

/// A named region of a flat parameter vector, e.g. one layer's weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub range: Range<usize>,
    /// `(rows, cols)`; biases are `(n, 1)`.
    pub shape: (usize, usize),
}

/// Flat trainable weights with a layout whose slices tile the vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSlice>,
}

impl ParamVector {
    /// Builds a vector from `(name, rows, cols)` entries laid out back to back.
    pub fn from_shapes<S: Into<String>>(
        shapes: impl IntoIterator<Item = (S, usize, usize)>,
        values: Vec<f64>,
    ) -> Self {
        let mut layout = Vec::new();
        let mut at = 0;
        for (name, rows, cols) in shapes {
            let len = rows * cols;
            layout.push(ParamSlice {
                name: name.into(),
                range: at..at + len,
                shape: (rows, cols),
            });
            at += len;
        }
        assert_eq!(
            at,
            values.len(),
            "layout covers {at} values, got {}",
            values.len()
        );
        Self { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range.clone()])
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_tile_exactly() {
        let p =
            ParamVector::from_shapes([("w", 2, 3), ("b", 2, 1)], (0..8).map(f64::from).collect());
        let mut covered = 0;
        for s in p.layout() {
            assert_eq!(s.range.start, covered);
            covered = s.range.end;
        }
        assert_eq!(covered, p.len());
        assert_eq!(p.slice("b").unwrap(), &[6.0, 7.0]);
    }

    #[test]
    #[should_panic]
    fn layout_must_cover_values() {
        ParamVector::from_shapes([("w", 2, 2)], vec![0.0; 5]);
    }
}
