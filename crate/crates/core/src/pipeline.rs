//! Spectrum → reduction → normal form with one set of options.

use std::sync::Arc;

use crate::error::Result;
use crate::evolution::{build_evolution, EvolutionOperator};
use crate::normalform::{normal_form, NormalFormConfig, NormalFormResult};
use crate::reduction::{block_diagonalize, BlockSystem, ReductionConfig};
use crate::report::Tolerances;
use crate::spectrum::{default_gamma_range, scan_spectrum, DichotomyTester, SpectrumConfig, SpectrumResult};
use crate::system::SystemSpec;

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub window: (f64, f64),
    pub tolerances: Tolerances,
    pub degree: u32,
    /// γ range of the scan; `None` derives it from the coefficients.
    pub gamma_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { window: (-20.0, 20.0), tolerances: Tolerances::default(), degree: 3, gamma_range: None, seed: 0x5eed }
    }
}

impl PipelineOptions {
    pub fn spectrum_config(&self) -> SpectrumConfig {
        SpectrumConfig {
            tol_gamma: self.tolerances.gamma,
            residual_threshold: self.tolerances.residual_threshold,
            ..SpectrumConfig::default()
        }
    }

    pub fn reduction_config(&self) -> ReductionConfig {
        ReductionConfig {
            spectrum: self.spectrum_config(),
            tol_gamma: self.tolerances.gamma,
            coupling_tol: self.tolerances.coupling,
            seed: self.seed,
            ..ReductionConfig::default()
        }
    }

    pub fn normal_form_config(&self) -> NormalFormConfig {
        NormalFormConfig {
            max_degree: self.degree,
            tail_tol: self.tolerances.tail,
            spectrum: self.spectrum_config(),
            seed: self.seed,
            ..NormalFormConfig::default()
        }
    }
}

pub struct Analysis {
    pub system: Arc<SystemSpec>,
    pub evolution: Arc<EvolutionOperator>,
    pub spectrum: SpectrumResult,
}

pub fn analyze(system: Arc<SystemSpec>, opts: &PipelineOptions) -> Result<Analysis> {
    system.validate()?;
    let evolution = Arc::new(build_evolution(system.clone(), opts.window, opts.tolerances.integrator)?);
    let cfg = opts.spectrum_config();
    let tester = DichotomyTester::new(&evolution, &cfg)?;
    let (lo, hi) = match opts.gamma_range {
        Some(r) => r,
        None => default_gamma_range(&evolution)?,
    };
    let spectrum = scan_spectrum(&tester, lo, hi, opts.tolerances.gamma)?;
    Ok(Analysis { system, evolution, spectrum })
}

pub fn reduce(analysis: &Analysis, opts: &PipelineOptions) -> Result<BlockSystem> {
    block_diagonalize(analysis.evolution.clone(), &analysis.spectrum, &opts.reduction_config())
}

pub fn normalize(analysis: &Analysis, blocks: &BlockSystem, opts: &PipelineOptions) -> Result<NormalFormResult> {
    normal_form(&analysis.system, blocks, &opts.normal_form_config())
}
