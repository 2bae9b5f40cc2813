//! Feature-space diagnostics: how well do projection features separate the
//! semantic classes of the underlying pixels?

use crate::grid::{cosine, FeatureGrid};
use crate::panoptic::{class_of, PanopticMap, VOID};

/// Majority class per feature cell: each cell covers a pixel bin of the
/// label raster; ties break toward real classes over void, then toward the
/// smaller class id.
pub fn majority_cell_classes(labels: &PanopticMap, grid_rows: usize, grid_cols: usize) -> Vec<u16> {
    let bin_h = labels.height as f64 / grid_rows as f64;
    let bin_w = labels.width as f64 / grid_cols as f64;
    let mut out = Vec::with_capacity(grid_rows * grid_cols);
    for gr in 0..grid_rows {
        let r0 = (gr as f64 * bin_h) as usize;
        let r1 = (((gr + 1) as f64 * bin_h) as usize).min(labels.height).max(r0 + 1);
        for gc in 0..grid_cols {
            let c0 = (gc as f64 * bin_w) as usize;
            let c1 = (((gc + 1) as f64 * bin_w) as usize).min(labels.width).max(c0 + 1);
            let mut counts: std::collections::BTreeMap<u16, usize> = Default::default();
            for r in r0..r1 {
                for c in c0..c1 {
                    let class = match labels.id(r, c) {
                        VOID => VOID,
                        id => class_of(id),
                    };
                    *counts.entry(class).or_insert(0) += 1;
                }
            }
            // BTreeMap iterates ids ascending with VOID last, so on equal
            // counts the earlier (smaller, non-void) class wins
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&class, _)| class)
                .unwrap_or(VOID);
            out.push(best);
        }
    }
    out
}

/// Mean cosine similarity within and across classes over a set of labeled
/// feature cells. Void cells are excluded. Returns `(intra, inter)` or None
/// when either mean has no pairs.
pub fn class_similarity_gap(cells: &[(Vec<f64>, u16)]) -> Option<(f64, f64)> {
    let labeled: Vec<&(Vec<f64>, u16)> = cells.iter().filter(|(_, c)| *c != VOID).collect();
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..labeled.len() {
        for j in (i + 1)..labeled.len() {
            let c = cosine(&labeled[i].0, &labeled[j].0);
            if labeled[i].1 == labeled[j].1 {
                intra.0 += c;
                intra.1 += 1;
            } else {
                inter.0 += c;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return None;
    }
    Some((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

/// Flatten a feature grid and its per-cell classes into labeled cells.
pub fn labeled_cells(features: &FeatureGrid, classes: &[u16]) -> Vec<(Vec<f64>, u16)> {
    assert_eq!(features.cells(), classes.len(), "cell count");
    (0..features.cells())
        .map(|i| (features.cell(i).to_vec(), classes[i]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Provenance;
    use crate::panoptic::encode_id;

    #[test]
    fn majority_pooling_picks_dominant_class() {
        let mut labels = PanopticMap::filled(4, 8, encode_id(1, 0).unwrap());
        // right half is sidewalk
        for r in 0..4 {
            for c in 4..8 {
                labels.set_id(r, c, encode_id(2, 0).unwrap());
            }
        }
        let classes = majority_cell_classes(&labels, 2, 2);
        assert_eq!(classes, vec![1, 2, 1, 2]);
    }

    #[test]
    fn tie_breaks_prefer_real_classes_over_void() {
        let mut labels = PanopticMap::filled(2, 2, VOID);
        labels.set_id(0, 0, encode_id(1, 0).unwrap());
        labels.set_id(0, 1, encode_id(1, 0).unwrap());
        // 2 street vs 2 void in the single bin: street wins
        let classes = majority_cell_classes(&labels, 1, 1);
        assert_eq!(classes, vec![1]);
    }

    #[test]
    fn separated_features_have_positive_gap() {
        let mut grid = FeatureGrid::zeros(2, 2, 2, Provenance::Regular);
        let data = [
            ([1.0, 0.05], 1u16),
            ([1.0, -0.05], 1),
            ([0.0, 1.0], 2),
            ([0.05, 1.0], 2),
        ];
        for (i, (v, _)) in data.iter().enumerate() {
            grid.cell_mut(i).copy_from_slice(v);
        }
        let classes: Vec<u16> = data.iter().map(|(_, c)| *c).collect();
        let cells = labeled_cells(&grid, &classes);
        let (intra, inter) = class_similarity_gap(&cells).unwrap();
        assert!(intra > 0.9);
        assert!(inter < 0.2);
    }
}
