//! `export-attn`: pixel attention maps, pixel contexts before and after
//! normalisation, adaption weights and lesion localisation scores.

use std::fmt::Write as _;
use std::path::Path;

use pyrpix::backbone::{AttentionKind, AttentionMaps, Network};
use pyrpix::config::{parse_list, Config};
use pyrpix::metrics::inside_outside_means;
use pyrpix::{Error, Result, Tensor};

use crate::commands::{load_data, out_dir, start, write};

const BATCH: usize = 16;

/// Binary 16-bit greyscale PGM of values in [0, 1] on an absolute scale,
/// so a constant 0.5 map is written as 32768 everywhere.
pub fn pgm16(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    bytes
}

fn grid_csv(values: &[f64], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn mean_std(column: &[f64]) -> (f64, f64) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-pixel mean and standard deviation over the context axis of
/// `t: [D, H, W]` and `t_hat: [D, H, W]`.
pub fn distribution_csv(t: &[f64], t_hat: &[f64], d: usize, height: usize, width: usize) -> String {
    let mut s = String::from("y,x,t_mean,t_std,t_hat_mean,t_hat_std\n");
    let plane = height * width;
    for p in 0..plane {
        let column = |v: &[f64]| (0..d).map(|k| v[k * plane + p]).collect::<Vec<_>>();
        let (tm, ts) = mean_std(&column(t));
        let (hm, hs) = mean_std(&column(t_hat));
        let _ = writeln!(s, "{},{},{tm},{ts},{hm},{hs}", p / width, p % width);
    }
    s
}

fn weight_csv(w: &Tensor) -> String {
    let names: &[&str] = match w.rank() {
        3 => &["d", "y", "x"],
        4 => &["out", "d", "ky", "kx"],
        _ => &[],
    };
    let mut s = if names.is_empty() {
        (0..w.rank()).map(|i| format!("i{i}")).collect::<Vec<_>>().join(",")
    } else {
        names.join(",")
    };
    s.push_str(",value\n");
    let shape = w.shape();
    for (flat, v) in w.data().iter().enumerate() {
        let mut index = vec![0; shape.len()];
        let mut rest = flat;
        for a in (0..shape.len()).rev() {
            index[a] = rest % shape[a];
            rest /= shape[a];
        }
        let idx: Vec<String> = index.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{},{v}", idx.join(","));
    }
    s
}

fn sample_slice(t: &Tensor, i: usize) -> Vec<f64> {
    let per = t.len() / t.shape()[0];
    t.data()[i * per..(i + 1) * per].to_vec()
}

fn export_site(dir: &Path, index: usize, m: &AttentionMaps, i: usize) -> Result<()> {
    let (h, w) = (m.gate.shape()[2], m.gate.shape()[3]);
    let stem = format!("s{}_b{}_n{index}", m.stage, m.block);
    let g = sample_slice(&m.gate, i);
    std::fs::write(dir.join(format!("{stem}_g.pgm")), pgm16(&g, h, w))?;
    write(dir.join(format!("{stem}_g.csv")), &grid_csv(&g, w))?;
    if let (Some(t), Some(t_hat)) = (&m.context, &m.normalized) {
        let d = t.shape()[1];
        let (tv, hv) = (sample_slice(t, i), sample_slice(t_hat, i));
        Tensor::new(vec![d, h, w], tv.clone())?.save(dir.join(format!("{stem}_T.pxt")))?;
        Tensor::new(vec![d, h, w], hv.clone())?.save(dir.join(format!("{stem}_That.pxt")))?;
        write(dir.join(format!("{stem}_dist.csv")), &distribution_csv(&tv, &hv, d, h, w))?;
    }
    Ok(())
}

pub fn run(c: &Config) -> Result<()> {
    let checkpoint = c.require("export", "checkpoint")?;
    if checkpoint.is_empty() {
        return Err(Error::InvalidArgument("export-attn needs --checkpoint".into()));
    }
    let mut manifest = start("export-attn", c, c.require("data", "data")?)?;
    let mut net = Network::load(checkpoint)?;
    let data = load_data(c, &mut manifest, false)?;
    let ds = &data.val.dataset;
    let raw = c.require("export", "indices")?;
    let indices: Vec<usize> =
        if raw.trim().eq_ignore_ascii_case("all") { (0..ds.len()).collect() } else { parse_list(raw, "sample index")? };
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::InvalidArgument(format!("sample index {bad} out of range for {} samples", ds.len())));
    }
    let out = out_dir(c)?;
    let dir = out.join("attn");
    std::fs::create_dir_all(&dir)?;

    let kind = net.spec().attention;
    if kind != AttentionKind::Ppca {
        for (stage, st) in net.spec().stages.iter().enumerate() {
            for block in 0..st.blocks {
                println!("stage {stage} block {block}: no pixel attention ({kind}), skipped");
            }
        }
        return Ok(());
    }
    for p in net.store.params().iter().filter(|p| p.name.ends_with(".ppca.weight")) {
        let site = p.name.trim_end_matches(".ppca.weight").replace("stage", "s").replace(".block", "_b");
        write(dir.join(format!("{site}_W.csv")), &weight_csv(&p.value))?;
    }

    let [_, ih, iw] = ds.image_shape();
    let last_stage = net.spec().stages.len() - 1;
    let mut localization = String::from("sample,label,stage,block,inside,outside\n");
    let (mut final_in, mut final_out, mut final_n) = (0.0, 0.0, 0usize);
    for chunk in indices.chunks(BATCH) {
        let batch = ds.gather(chunk);
        let maps = net.attention_maps(&batch.images)?;
        for (i, &index) in chunk.iter().enumerate() {
            for m in &maps {
                export_site(&dir, index, m, i)?;
                let Some(lesion) = data.val.lesions[index] else { continue };
                let (h, w) = (m.gate.shape()[2], m.gate.shape()[3]);
                let mask = lesion.mask((ih, iw), (h, w));
                let Some((inside, outside)) = inside_outside_means(&sample_slice(&m.gate, i), &mask) else { continue };
                let _ = writeln!(localization, "{index},{},{},{},{inside},{outside}", ds.labels[index], m.stage, m.block);
                if m.stage == last_stage {
                    final_in += inside;
                    final_out += outside;
                    final_n += 1;
                }
            }
        }
    }
    write(out.join("localization.csv"), &localization)?;
    println!("exported {} samples to {}", indices.len(), dir.display());
    if final_n > 0 {
        let (inside, outside) = (final_in / final_n as f64, final_out / final_n as f64);
        println!("final-stage attention: inside lesion {inside:.6}, outside {outside:.6} over {final_n} lesion maps");
    } else {
        println!("final-stage attention: no lesion fell on a final-stage cell among the exported samples");
    }
    Ok(())
}
