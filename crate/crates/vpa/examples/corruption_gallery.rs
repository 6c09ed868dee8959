//! Render the shapes dataset through every corruption family and severity
//! and print how far each moves the pixels (mean per-pixel L1 distance),
//! plus the three style shifts.
//!
//!     cargo run --release --example corruption_gallery

use vpa::data::{
    corrupt, generate_shapes, style_shift, CorruptionSpec, ShapesConfig, Style, ALL_FAMILIES,
};

fn main() -> vpa::Result<()> {
    let ds = generate_shapes(&ShapesConfig::new(50, 32, 0))?;
    println!("{:<16} {}", "family", "mean |delta| at severity 1..5");
    for family in ALL_FAMILIES {
        let mut row = format!("{family:<16}");
        for severity in 1..=5u8 {
            let mut total = 0.0;
            let mut n = 0usize;
            for (i, img) in ds.images.iter().enumerate() {
                let c = corrupt(img, &CorruptionSpec { family, severity, seed: i as u64 })?;
                total += img
                    .data
                    .iter()
                    .zip(&c.data)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                n += img.numel();
            }
            row.push_str(&format!(" {:.4}", total / n as f64));
        }
        println!("{row}");
    }

    for style in [Style::Outline, Style::Inverted, Style::Textured] {
        let shifted = style_shift(&ds, style, 0);
        let mut total = 0.0;
        let mut n = 0usize;
        for (a, b) in ds.images.iter().zip(&shifted.images) {
            total += a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>();
            n += a.numel();
        }
        println!("style {:<10} mean |delta| = {:.4}", style.to_string(), total / n as f64);
    }
    Ok(())
}
