//! CSV and SVG artifacts: 2-D token projections, neighbor tables and
//! training curves.

use std::fmt::Write as _;
use std::path::Path;

use forgekey_core::backbone::PathwayMask;
use forgekey_core::checkpoint::write_atomic;
use forgekey_core::inference::{predict, FusionStrategy};
use forgekey_core::{Checkpoint, Dataset, Error, Result, Split};
use nalgebra::{DMatrix, SymmetricEigen};

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Projects `rows` (n x d, row-major) onto the top two principal axes.
/// Each axis is signed so its largest-magnitude loading is positive.
pub fn pca2(rows: &[f32], d: usize) -> Result<Vec<[f64; 2]>> {
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(Error::Data("nothing to project".into()));
    }
    let n = rows.len() / d;
    let x = DMatrix::from_row_iterator(n, d, rows.iter().map(|&v| v as f64));
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut axes = Vec::new();
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let r = centered.row(i);
            let coord = |a: usize| axes.get(a).map_or(0.0, |v| r.iter().zip(v.iter()).map(|(x, y)| x * y).sum());
            [coord(0), coord(1)]
        })
        .collect())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot, one color per label.
pub fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[usize]) -> String {
    let (w, h, m) = (480.0, 480.0, 40.0);
    let (x0, x1) = bounds(points.iter().map(|p| p[0]));
    let (y0, y1) = bounds(points.iter().map(|p| p[1]));
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{m}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black" stroke-width="1"/>"#,
        b = h - m,
        r = w - m
    );
    for (p, &l) in points.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            sx(p[0]),
            sy(p[1]),
            PALETTE[l % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One stacked panel per series, each with its own y range.
pub fn lines_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, panel, m) = (560.0, 140.0, 40.0);
    let h = 30.0 + panel * series.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{m}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    for (i, (name, pts)) in series.iter().enumerate() {
        let top = 30.0 + panel * i as f64 + 10.0;
        let bottom = top + panel - 30.0;
        let (x0, x1) = bounds(pts.iter().map(|p| p.0));
        let (y0, y1) = bounds(pts.iter().map(|p| p.1));
        let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);
        let _ = writeln!(
            s,
            r#"<path d="M{m} {top} V{bottom} H{r}" fill="none" stroke="black" stroke-width="1"/>"#,
            r = w - m
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y}" font-family="sans-serif" font-size="11">{} [{y0:.4}, {y1:.4}]</text>"#,
            escape(name),
            x = m + 6.0,
            y = top + 12.0
        );
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##,
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn points_csv(points: &[[f64; 2]], labels: &[usize]) -> String {
    let mut s = String::from("x,y,label\n");
    for (p, l) in points.iter().zip(labels) {
        let _ = writeln!(s, "{},{},{l}", p[0], p[1]);
    }
    s
}

pub fn check_shape(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    let b = &ckpt.config.backbone;
    if data.channels != b.channels || data.image_size != b.image_size {
        return Err(Error::Data(format!(
            "dataset images are {}x{}x{}, checkpoint expects {}x{}x{}",
            data.channels, data.image_size, data.image_size, b.channels, b.image_size, b.image_size
        )));
    }
    Ok(())
}

/// `values2d.{csv,svg}` from live exemplar values and `cls2d.{csv,svg}` from
/// class-token features of each live entry's own sample.
pub fn tokens2d(ckpt: &Checkpoint, data: &Dataset, out: &Path) -> Result<usize> {
    check_shape(ckpt, data)?;
    let mem = &ckpt.memory;
    let live: Vec<usize> = (0..mem.len()).filter(|&i| mem.live_flags()[i]).collect();
    let mut values = Vec::new();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for &i in &live {
        let id = mem.ids()[i];
        values.extend_from_slice(mem.value(i));
        let (_, f) = ckpt.params.run_with_tokens(data.image(id)?, &[mem.value(i)], PathwayMask::BOTH)?;
        feats.extend_from_slice(&f[0]);
        labels.push(data.label(id)?);
    }
    let v2 = pca2(&values, mem.token_dim())?;
    let c2 = pca2(&feats, ckpt.config.backbone.hidden)?;
    write_atomic(&out.join("values2d.csv"), points_csv(&v2, &labels).as_bytes())?;
    write_atomic(&out.join("values2d.svg"), scatter_svg("exemplar values (PCA)", &v2, &labels).as_bytes())?;
    write_atomic(&out.join("cls2d.csv"), points_csv(&c2, &labels).as_bytes())?;
    write_atomic(&out.join("cls2d.svg"), scatter_svg("class-token features (PCA)", &c2, &labels).as_bytes())?;
    Ok(live.len())
}

/// `neighbors.csv`: retrieved ids, similarities and weights for every
/// forget id and the first `test_queries` test samples, before and after
/// deleting `forget`.
pub fn neighbors(
    ckpt: &Checkpoint,
    data: &Dataset,
    forget: &[u64],
    strategy: &FusionStrategy,
    test_queries: usize,
    out: &Path,
) -> Result<usize> {
    check_shape(ckpt, data)?;
    let mut after = ckpt.memory.clone();
    after.delete(forget)?;
    let queries: Vec<u64> =
        forget.iter().copied().chain(data.split_ids(Split::Test).into_iter().take(test_queries)).collect();
    let mut s = String::from("query,split,label,phase,rank,neighbor,neighbor_label,similarity,weight,predicted\n");
    for &q in &queries {
        let image = data.image(q)?;
        let tag = if forget.contains(&q) { "forget" } else { data.split_at(data.position(q)?).as_str() };
        for (phase, mem) in [("pre", &ckpt.memory), ("post", &after)] {
            let p = predict(image, &ckpt.params, &ckpt.encoder, mem, strategy)?;
            for (rank, ((&nb, sim), w)) in p.neighbors.iter().zip(&p.similarities).zip(&p.weights).enumerate() {
                let _ = writeln!(
                    s,
                    "{q},{tag},{},{phase},{rank},{nb},{},{sim},{w},{}",
                    data.label(q)?,
                    data.label(nb)?,
                    p.class
                );
            }
        }
    }
    write_atomic(&out.join("neighbors.csv"), s.as_bytes())?;
    Ok(queries.len())
}

/// `curves.csv` (the epoch history) and `curves.svg`.
pub fn curves(ckpt: &Checkpoint, out: &Path) -> Result<usize> {
    let h = &ckpt.history;
    let pick = |f: fn(&forgekey_core::EpochRecord) -> f64| -> Vec<(f64, f64)> { h.iter().map(|r| (r.epoch as f64, f(r))).collect() };
    let series = [
        ("train loss", pick(|r| r.train_loss)),
        ("val accuracy", pick(|r| r.val_acc)),
        ("learning rate", pick(|r| r.lr)),
        ("pathway sensitivity (probe)", pick(|r| r.p_s_probe)),
    ];
    write_atomic(&out.join("curves.csv"), ckpt.history_csv().as_bytes())?;
    write_atomic(&out.join("curves.svg"), lines_svg("training curves", &series).as_bytes())?;
    Ok(h.len())
}
