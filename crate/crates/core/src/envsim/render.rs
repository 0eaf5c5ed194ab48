use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Arm, EnvConfig, ShapeTag, WorldState};
use crate::error::{Error, Result};
use crate::util::rng_for;

/// 8-bit RGB image, row-major, 3 channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel values scaled to [0, 1], in storage order.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "expected {} values for a {width}x{height} image, got {}",
                width * height * 3,
                values.len()
            )));
        }
        let data = values
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Runtime(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::Runtime(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Input(format!("png decode: {e}")))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Input(format!("png decode: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Input("only 8-bit RGB png images are supported".into()));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            data: buf,
        })
    }

    /// Binary PPM (P6), handy for eyeballing renders.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

fn shade(rgb: [u8; 3], amount: i32) -> [u8; 3] {
    rgb.map(|c| (c as i32 + amount).clamp(0, 255) as u8)
}

fn mix(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (a[i] as f64 * (1.0 - t) + b[i] as f64 * t).round() as u8;
    }
    out
}

/// Top-down render of the table. x (forward) points up the image and y (left)
/// points to the image's left, so pixel (row, col) covers world
/// x = size - (row + 0.5) / scale, y = size - (col + 0.5) / scale.
pub fn render(config: &EnvConfig, state: &WorldState, render_seed: u64) -> Image {
    let n = config.image_size;
    let scale = n as f64 / config.table_size;
    let mut img = Image::filled(n, n, state.background);

    let world_of = |row: usize, col: usize| -> (f64, f64) {
        (
            config.table_size - (row as f64 + 0.5) / scale,
            config.table_size - (col as f64 + 0.5) / scale,
        )
    };

    let fill = |img: &mut Image, center: [f64; 2], half: f64, round: bool, rgb: [u8; 3]| {
        for row in 0..n {
            for col in 0..n {
                let (x, y) = world_of(row, col);
                let dx = (x - center[0]).abs();
                let dy = (y - center[1]).abs();
                let inside = if round {
                    dx * dx + dy * dy <= half * half
                } else {
                    dx <= half && dy <= half
                };
                if inside {
                    img.put(row, col, rgb);
                }
            }
        }
    };

    for o in state.objects.iter().filter(|o| o.shape == ShapeTag::Zone) {
        fill(&mut img, o.pos, 1.0, false, mix(state.background, o.color.rgb(), 0.55));
    }
    for o in state.objects.iter().filter(|o| o.shape == ShapeTag::Button) {
        let rgb = if o.pressed {
            shade(o.color.rgb(), -80)
        } else {
            o.color.rgb()
        };
        fill(&mut img, o.pos, 0.6, true, rgb);
    }
    let mut blocks: Vec<_> = state.objects.iter().filter(|o| o.shape == ShapeTag::Block).collect();
    blocks.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.id.cmp(&b.id)));
    for o in blocks {
        let lift = (o.z * 25.0).round() as i32;
        fill(&mut img, o.pos, 0.5, false, shade(o.color.rgb(), lift));
    }

    for arm in Arm::BOTH {
        let a = state.arm(arm);
        let body = match arm {
            Arm::Left => [255, 255, 255],
            Arm::Right => [20, 20, 20],
        };
        // Marker grows with height so z is visible from above.
        let half = 0.2 + 0.08 * a.ee[2];
        fill(&mut img, [a.ee[0], a.ee[1]], half, true, body);
        if a.gripper < 0.5 {
            fill(&mut img, [a.ee[0], a.ee[1]], 0.15, true, [128, 128, 128]);
        }
    }

    if config.pixel_noise > 0 {
        let mut rng = rng_for(render_seed, "render-noise");
        let amp = config.pixel_noise as i32;
        for v in img.data.iter_mut() {
            let d: i32 = rng.random_range(-amp..=amp);
            *v = (*v as i32 + d).clamp(0, 255) as u8;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let mut img = Image::filled(16, 16, [10, 20, 30]);
        img.put(3, 4, [255, 0, 7]);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn unit_conversion_round_trips() {
        let img = Image::filled(4, 4, [0, 128, 255]);
        let back = Image::from_unit(4, 4, &img.to_unit()).unwrap();
        assert_eq!(img, back);
        assert!(Image::from_unit(4, 4, &[0.0; 5]).is_err());
    }
}
