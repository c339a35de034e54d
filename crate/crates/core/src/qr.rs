//! Minimum printed size of a QR tag from scanning distance, scan conditions
//! and camera geometry. Lengths are millimeters.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

/// Modules per side of the normalizing reference symbol (Version 2).
pub const REFERENCE_MODULES: u32 = 25;
pub const BASE_DISTANCE_FACTOR: u32 = 10;
pub const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;
/// Published conclusion for the default inputs, kept for comparison.
pub const REFERENCE_CLAIM: &str = "at least 21*21mm";
/// Scanning distance at which the environment bound equals the published 21 mm.
pub const RECONCILING_D_SCAN_MM: f64 = 250.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ScanConditions {
    pub poor_lighting: bool,
    pub mid_light_colored_code: bool,
    pub not_front_on: bool,
}

impl ScanConditions {
    pub fn count(&self) -> u32 {
        [self.poor_lighting, self.mid_light_colored_code, self.not_front_on]
            .iter()
            .filter(|b| **b)
            .count() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QrSizingInput {
    pub d_scan_mm: f64,
    pub conditions: ScanConditions,
    pub modules_per_side: u32,
    pub pixels_per_module: u32,
    pub fov_mm: f64,
    pub resolution_pixels: f64,
    pub aspect_phi: f64,
}

impl Default for QrSizingInput {
    fn default() -> Self {
        QrSizingInput {
            d_scan_mm: 300.0,
            conditions: ScanConditions::default(),
            modules_per_side: 21,
            pixels_per_module: 10,
            fov_mm: 340.0,
            resolution_pixels: 12_000_000.0,
            aspect_phi: GOLDEN_RATIO,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QrSizingResult {
    pub k_den: f64,
    pub k_dis: f64,
    pub l_min1_mm: f64,
    pub ccd_w_px: f64,
    pub ccd_h_px: f64,
    pub l_min2_mm: f64,
    pub l_min_mm: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum QrError {
    #[error("{0} must be a positive finite number")]
    NotPositive(&'static str),
    #[error("{0} modules per side is not supported (21 or 25)")]
    UnsupportedVersion(u32),
}

pub fn data_density_factor(modules_per_side: u32) -> f64 {
    modules_per_side as f64 / REFERENCE_MODULES as f64
}

pub fn distance_factor(conditions: &ScanConditions) -> f64 {
    (BASE_DISTANCE_FACTOR - conditions.count()) as f64
}

/// Environment bound.
pub fn min_size_environment(d_scan_mm: f64, k_dis: f64, k_den: f64) -> f64 {
    d_scan_mm / k_dis * k_den
}

/// Sensor width and height in pixels for a total pixel count and a
/// width/height ratio.
pub fn ccd_dimensions(resolution_pixels: f64, aspect_phi: f64) -> (f64, f64) {
    let h = (resolution_pixels / aspect_phi).sqrt();
    (aspect_phi * h, h)
}

/// Camera bound: the symbol must span `pixels_per_module` pixels per
/// module across a field `fov_mm` wide imaged onto `ccd_w_px` pixels.
pub fn min_size_camera(pixels_per_module: u32, modules_per_side: u32, fov_mm: f64, ccd_w_px: f64) -> f64 {
    (pixels_per_module as f64 * modules_per_side as f64) * fov_mm / ccd_w_px
}

fn positive(name: &'static str, v: f64) -> Result<(), QrError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(QrError::NotPositive(name))
    }
}

pub fn min_qr_size(input: &QrSizingInput) -> Result<QrSizingResult, QrError> {
    positive("d_scan_mm", input.d_scan_mm)?;
    positive("fov_mm", input.fov_mm)?;
    positive("resolution_pixels", input.resolution_pixels)?;
    positive("aspect_phi", input.aspect_phi)?;
    positive("pixels_per_module", input.pixels_per_module as f64)?;
    if !matches!(input.modules_per_side, 21 | 25) {
        return Err(QrError::UnsupportedVersion(input.modules_per_side));
    }
    let k_den = data_density_factor(input.modules_per_side);
    let k_dis = distance_factor(&input.conditions);
    let l_min1_mm = min_size_environment(input.d_scan_mm, k_dis, k_den);
    let (ccd_w_px, ccd_h_px) = ccd_dimensions(input.resolution_pixels, input.aspect_phi);
    let l_min2_mm = min_size_camera(
        input.pixels_per_module,
        input.modules_per_side,
        input.fov_mm,
        ccd_w_px,
    );
    Ok(QrSizingResult {
        k_den,
        k_dis,
        l_min1_mm,
        ccd_w_px,
        ccd_h_px,
        l_min2_mm,
        l_min_mm: l_min1_mm.max(l_min2_mm),
    })
}

/// Inputs, intermediates and result, plus the published figure and the
/// scanning distance that reproduces it.
#[derive(Debug, Clone, Serialize)]
pub struct QrReport {
    pub input: QrSizingInput,
    pub result: QrSizingResult,
    pub reference_claim: &'static str,
    pub reconciling_d_scan_mm: f64,
    pub reconciling_l_min1_mm: f64,
}

impl QrReport {
    pub fn new(input: QrSizingInput) -> Result<QrReport, QrError> {
        let result = min_qr_size(&input)?;
        Ok(QrReport {
            input,
            result,
            reference_claim: REFERENCE_CLAIM,
            reconciling_d_scan_mm: RECONCILING_D_SCAN_MM,
            reconciling_l_min1_mm: min_size_environment(RECONCILING_D_SCAN_MM, result.k_dis, result.k_den),
        })
    }
}

impl fmt::Display for QrReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = &self.input;
        let r = &self.result;
        writeln!(f, "QR minimum size")?;
        writeln!(f, "  inputs")?;
        writeln!(f, "    scanning distance      {:.1} mm", i.d_scan_mm)?;
        writeln!(
            f,
            "    conditions             poor_lighting={} mid_light_colored_code={} not_front_on={}",
            i.conditions.poor_lighting, i.conditions.mid_light_colored_code, i.conditions.not_front_on
        )?;
        writeln!(f, "    modules per side       {}", i.modules_per_side)?;
        writeln!(f, "    pixels per module      {}", i.pixels_per_module)?;
        writeln!(f, "    field of view          {:.1} mm", i.fov_mm)?;
        writeln!(f, "    sensor resolution      {} px", i.resolution_pixels)?;
        writeln!(f, "    aspect ratio           {:.6}", i.aspect_phi)?;
        writeln!(f, "  intermediates")?;
        writeln!(f, "    K_den                  {:.4}", r.k_den)?;
        writeln!(f, "    K_dis                  {}", r.k_dis)?;
        writeln!(f, "    CCD width x height     {:.1} x {:.1} px", r.ccd_w_px, r.ccd_h_px)?;
        writeln!(f, "    L_min1 (environment)   {:.1} mm", r.l_min1_mm)?;
        writeln!(f, "    L_min2 (camera)        {:.1} mm", r.l_min2_mm)?;
        writeln!(f, "  result")?;
        writeln!(f, "    L_min                  {:.1} mm", r.l_min_mm)?;
        writeln!(f, "  reference")?;
        writeln!(f, "    published conclusion   {}", self.reference_claim)?;
        write!(
            f,
            "    L_min1 at D_scan = {:.0} mm: {:.1} mm",
            self.reconciling_d_scan_mm, self.reconciling_l_min1_mm
        )
    }
}
