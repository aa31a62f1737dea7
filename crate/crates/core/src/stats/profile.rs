use crate::data::Dataset;

/// Per-recording acoustic summary: the mean and standard deviation of every
/// raw feature channel over frames, each column then z-scored across the
/// cohort (constant columns become 0).
pub fn acoustic_profiles(data: &Dataset) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| {
            let a = &s.audio;
            (0..a.n_channels)
                .flat_map(|c| {
                    let row = a.row(c);
                    let n = row.len().max(1) as f64;
                    let m = row.iter().sum::<f64>() / n;
                    let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                    [m, v.sqrt()]
                })
                .collect()
        })
        .collect();
    let (n, k) = (rows.len(), rows.first().map_or(0, Vec::len));
    for j in 0..k {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let sd = (rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n as f64).sqrt();
        for r in rows.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - m) / sd } else { 0.0 };
        }
    }
    rows
}
