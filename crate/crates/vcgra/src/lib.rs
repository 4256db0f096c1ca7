// SPDX-License-Identifier: Apache-2.0

//! File formats, configuration and experiment harness around `vcgra-core`.

pub mod catalog;
pub mod config;
pub mod experiment;
pub mod report;
pub mod stats;
pub mod workload_file;
