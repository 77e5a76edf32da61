//! De-identification of clinical narrative text.
//!
//! The crate covers the whole pipeline: documents and the BIO codec
//! ([`text`], [`bio`]), revisioned annotation with agreement statistics
//! ([`annotation`]), dataset construction and a synthetic discharge-summary
//! generator ([`datasets`]), base taggers ([`taggers`]), voting and stacking
//! ensembles ([`ensemble`]), evaluation ([`metrics`]) and surrogate
//! redaction ([`redaction`]).

pub mod annotation;
pub mod bio;
pub mod datasets;
pub mod ensemble;
pub mod metrics;
pub mod parallel;
pub mod redaction;
pub mod taggers;
pub mod text;
