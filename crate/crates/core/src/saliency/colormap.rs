use std::sync::LazyLock;

/// Raw text of the shipped 256-entry blue-green-yellow-red table.
pub const COLORMAP_CSV: &str = include_str!("../../assets/colormap.csv");

static SHIPPED: LazyLock<Colormap> =
    LazyLock::new(|| Colormap::parse_csv(COLORMAP_CSV).expect("shipped colormap is well formed"));

/// 256 RGB entries; lookups interpolate linearly between neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Colormap {
    entries: Vec<[u8; 3]>,
}

impl Colormap {
    pub fn shipped() -> &'static Colormap {
        &SHIPPED
    }

    /// Parses `r,g,b` lines; a non-numeric first line is treated as a header.
    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut entries = Vec::with_capacity(256);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Result<Vec<u8>, _> = fields.iter().map(|f| f.parse::<u8>()).collect();
            match parsed {
                Ok(v) if v.len() == 3 => entries.push([v[0], v[1], v[2]]),
                _ if n == 0 => continue,
                _ => return Err(format!("line {}: expected r,g,b bytes, got {line:?}", n + 1)),
            }
        }
        if entries.len() != 256 {
            return Err(format!("expected 256 entries, got {}", entries.len()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[[u8; 3]] {
        &self.entries
    }

    /// Colour for a value in `[0, 1]` (clamped).
    pub fn lookup(&self, value: f64) -> [u8; 3] {
        let pos = value.clamp(0.0, 1.0) * 255.0;
        let lo = (pos.floor() as usize).min(254);
        let t = pos - lo as f64;
        let (a, b) = (self.entries[lo], self.entries[lo + 1]);
        std::array::from_fn(|c| (a[c] as f64 * (1.0 - t) + b[c] as f64 * t).round() as u8)
    }
}
