//! Signal side of the cuff-less blood-pressure toolkit.
//!
//! The modules follow the data as it moves through the pipeline:
//!
//! * [`waveform`]: the [`Record`](waveform::Record) model, its on-disk CSV +
//!   JSON sidecar format, and a deterministic synthetic PPG/ABP generator.
//! * [`preprocess`]: record cleaning, Butterworth bandpass design, zero-phase
//!   filtering and moving-average smoothing.
//! * [`segmentation`]: SDPPG, peak detection, foot-to-foot cycle extraction,
//!   frame quality gating and ABP target labelling.
//! * [`features`]: the 12 per-cycle morphological features, stacked 48-cycle
//!   samples, dataset normalization and the `PFDS` dataset file.
//! * [`evaluation`]: error metrics, AAMI / BHS checks, Bland-Altman analysis
//!   and plot-ready report files.

pub mod evaluation;
pub mod features;
pub mod preprocess;
pub mod segmentation;
pub mod waveform;

/// Default sampling rate of the waveform database the toolkit targets, in Hz.
pub const DEFAULT_FS: f64 = 62.4;
