"""Stationary waiting time and throughput of a picker serving two carousels."""
from carousel.analytic import StationarySolution, solve
from carousel.errors import (CarouselError, FitError, InvalidDistributionError,
                             SolverError)
from carousel.oracles import (GridSolution, SimulationEstimate, grid_solve,
                              series_partial_sums, simulate)
from carousel.phasetype import (ErlangMixture, Hyperexponential, MomentSummary,
                                fit, fit_hyperexponential, fit_mixed_erlang)

__all__ = [
    "CarouselError", "ErlangMixture", "FitError", "GridSolution", "Hyperexponential",
    "InvalidDistributionError", "MomentSummary", "SimulationEstimate", "SolverError",
    "StationarySolution", "fit", "fit_hyperexponential", "fit_mixed_erlang", "grid_solve",
    "series_partial_sums", "simulate", "solve",
]
