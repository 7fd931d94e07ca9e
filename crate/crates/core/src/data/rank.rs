use super::PanelDataset;

/// Maps values to mid-ranks scaled into `[-1, 1]`: `2 (rank - 1) / (n - 1) - 1`.
/// Tied values share their average rank. A single value maps to 0.
pub fn rank_map(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1..=end share their average (1-based)
        let mid_rank = (start + end + 1) as f64 / 2.0;
        let scaled = 2.0 * (mid_rank - 1.0) / (n - 1) as f64 - 1.0;
        for &i in &order[start..end] {
            out[i] = scaled;
        }
        start = end;
    }
    out
}

/// Replaces every characteristic with its cross-sectional rank within the
/// month, scaled into `[-1, 1]`. Missing values are imputed to 0 (the
/// cross-sectional median) and stay flagged as missing, so the map is
/// idempotent.
pub fn rank_normalize(panel: &mut PanelDataset) {
    let k = panel.char_dim();
    let mut members = Vec::with_capacity(panel.n_assets());
    let mut values = Vec::with_capacity(panel.n_assets());
    for t in 0..panel.n_months() {
        for j in 0..k {
            members.clear();
            values.clear();
            for i in 0..panel.n_assets() {
                let cell = panel.cell(i, t);
                if !panel.present[cell] {
                    continue;
                }
                let at = cell * k + j;
                if panel.char_missing[at] {
                    panel.chars[at] = 0.0;
                } else {
                    members.push(at);
                    values.push(panel.chars[at]);
                }
            }
            if values.len() == 1 {
                log::warn!(
                    "{}: only one asset reports {}; set to 0",
                    panel.months[t],
                    panel.char_names[j]
                );
            }
            for (&at, v) in members.iter().zip(rank_map(&values)) {
                panel.chars[at] = v;
            }
        }
    }
}
