"""Physics definitions: problem data, fluid and rock property curves, wells, manufactured solution."""

import logging
import math
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
import numpy.typing as npt

from stevmfe.errors import ConfigurationError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ArrayLike = FloatArray | float

DARCY_CONSTANT = 1.127e-3
CUBIC_FEET_PER_BARREL = 5.614583
BOUNDARY_NAMES = ("x_low", "x_high", "y_low", "y_high")


class ModelKind(StrEnum):
    """Physics selection."""

    LINEAR_PARABOLIC = "linear_parabolic"
    SINGLE_PHASE_TRACER = "single_phase_tracer"
    TWO_PHASE = "two_phase"


MODEL_FIELDS: dict[ModelKind, tuple[str, ...]] = {
    ModelKind.LINEAR_PARABOLIC: ("p",),
    ModelKind.SINGLE_PHASE_TRACER: ("p", "c"),
    ModelKind.TWO_PHASE: ("p_o", "s_w"),
}

# Auxiliary fluxes first so the per-face flux block is lower triangular.
MODEL_FAMILIES: dict[ModelKind, tuple[str, ...]] = {
    ModelKind.LINEAR_PARABOLIC: ("u",),
    ModelKind.SINGLE_PHASE_TRACER: ("u", "z"),
    ModelKind.TWO_PHASE: ("ut_o", "ut_w", "u_o", "u_w"),
}


class UnitSystem(StrEnum):
    """Unit system of all inputs.

    ``field`` means psi, ft, day, cP, mD and lb/ft^3; well rates are STB/day.
    """

    FIELD = "field"
    DIMENSIONLESS = "dimensionless"

    @property
    def darcy_factor(self) -> float:
        """Converts permeability/viscosity times pressure gradient to a volumetric flux."""
        return DARCY_CONSTANT * CUBIC_FEET_PER_BARREL if self is UnitSystem.FIELD else 1.0

    @property
    def rate_factor(self) -> float:
        """Converts configured well rates to volume per unit time."""
        return CUBIC_FEET_PER_BARREL if self is UnitSystem.FIELD else 1.0


@dataclass(frozen=True)
class FluidProps:
    """Slightly compressible fluid."""

    reference_density: float = 1.0
    reference_pressure: float = 0.0
    compressibility: float = 0.0
    viscosity: float = 1.0


@dataclass(frozen=True)
class RelPermParams:
    """Brooks-Corey relative permeability parameters."""

    s_wirr: float = 0.2
    s_or: float = 0.2
    krw0: float = 1.0
    kro0: float = 1.0
    n_w: float = 2.0
    n_o: float = 2.0


@dataclass(frozen=True)
class CapillaryParams:
    """van Genuchten capillary pressure parameters; ``delta`` clamps the singularity."""

    a: float = 0.8
    b: float = 0.6255
    c: float = 2.67
    delta: float = 1e-6


class WellKind(StrEnum):
    """Well control."""

    INJECTOR = "injector"
    PRODUCER = "producer"


@dataclass(frozen=True)
class WellSpec:
    """A well completed in one cell.

    Injectors are rate controlled and inject water (carrying ``concentration`` of
    tracer); producers are controlled by bottom-hole pressure.
    """

    name: str
    subdomain: int
    index: tuple[int, ...]
    kind: WellKind
    rate: float = 0.0
    concentration: float = 1.0
    bottom_hole_pressure: float = 0.0
    well_index: float | None = None
    wellbore_radius: float = 0.01


class BoundaryKind(StrEnum):
    """Outer boundary condition type."""

    NO_FLOW = "no_flow"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class BoundaryCondition:
    """Condition on one side of the global box.

    With ``exact`` set, the Dirichlet value is the manufactured solution.
    ``concentration`` is carried by tracer inflow through a Dirichlet side.
    """

    kind: BoundaryKind = BoundaryKind.NO_FLOW
    value: float = 0.0
    exact: bool = False
    concentration: float = 0.0


@dataclass(frozen=True)
class ManufacturedForcing:
    """Forcing of the manufactured parabolic solution."""

    c1: float = 1.0


@dataclass(frozen=True)
class InitialData:
    """Initial fields; ``manufactured`` samples the exact solution at t = 0."""

    pressure: float = 0.0
    concentration: float = 0.0
    saturation: float = 0.2
    manufactured: bool = False


@dataclass(frozen=True)
class ModelProblem:
    """Physics selection with all fluid, rock, well, boundary and initial data."""

    kind: ModelKind
    units: UnitSystem = UnitSystem.DIMENSIONLESS
    water: FluidProps = field(default_factory=FluidProps)
    oil: FluidProps | None = None
    diffusion: float = 0.0
    relperm: RelPermParams = field(default_factory=RelPermParams)
    capillary: CapillaryParams | None = None
    wells: tuple[WellSpec, ...] = ()
    boundary: dict[str, BoundaryCondition] = field(default_factory=dict)
    initial: InitialData = field(default_factory=InitialData)
    forcing: ManufacturedForcing | None = None
    source: float = 0.0

    @property
    def fields(self) -> tuple[str, ...]:
        """Names of the cell unknowns."""
        return MODEL_FIELDS[self.kind]

    @property
    def families(self) -> tuple[str, ...]:
        """Names of the flux families."""
        return MODEL_FAMILIES[self.kind]

    @property
    def oil_props(self) -> FluidProps:
        """Oil properties, required by the two-phase model."""
        if self.oil is None:
            msg = "model.oil: required for the two_phase model"
            raise ConfigurationError(msg)
        return self.oil

    def boundary_condition(self, name: str) -> BoundaryCondition:
        """Condition on a boundary side; unspecified sides are no-flow."""
        return self.boundary.get(name, BoundaryCondition())

    def dirichlet_value(self, name: str, centre: tuple[float, ...], t: float) -> float:
        """Dirichlet datum on a side at a space-time point."""
        condition = self.boundary_condition(name)
        if condition.exact:
            c1 = self.forcing.c1 if self.forcing is not None else 1.0
            pressure, _ = manufactured_solution(centre[0], centre[1], t, c1)
            return float(pressure)
        return condition.value

    def validate(self, path: str = "model") -> None:
        """Check every parameter invariant.

        Args:
            path: Config path prefix for error messages.

        Raises:
            ConfigurationError: On the first violated invariant.
        """
        fluids = [("water", self.water)]
        if self.kind is ModelKind.TWO_PHASE:
            fluids.append(("oil", self.oil_props))
        for name, fluid in fluids:
            if fluid.viscosity <= 0:
                msg = f"{path}.{name}.viscosity: must be > 0, got {fluid.viscosity}"
                raise ConfigurationError(msg)
            if fluid.compressibility < 0:
                msg = f"{path}.{name}.compressibility: must be >= 0, got {fluid.compressibility}"
                raise ConfigurationError(msg)
            if fluid.reference_density <= 0:
                msg = f"{path}.{name}.reference_density: must be > 0, got {fluid.reference_density}"
                raise ConfigurationError(msg)

        if self.kind is ModelKind.SINGLE_PHASE_TRACER and self.diffusion <= 0:
            msg = f"{path}.diffusion: must be > 0 for the tracer model, got {self.diffusion}"
            raise ConfigurationError(msg)

        relperm = self.relperm
        if relperm.s_wirr < 0 or relperm.s_or < 0 or relperm.s_wirr + relperm.s_or >= 1:
            msg = f"{path}.relative_permeability: need 0 <= s_wirr, s_or and s_wirr + s_or < 1"
            raise ConfigurationError(msg)
        if relperm.krw0 <= 0 or relperm.kro0 <= 0 or relperm.n_w <= 0 or relperm.n_o <= 0:
            msg = f"{path}.relative_permeability: end points and exponents must be > 0"
            raise ConfigurationError(msg)

        if self.capillary is not None:
            cap = self.capillary
            if cap.a <= 0 or not 0 < cap.b <= 1 or cap.c <= 1 or cap.delta <= 0:
                msg = f"{path}.capillary_pressure: need a > 0, b in (0, 1], c > 1 and delta > 0"
                raise ConfigurationError(msg)

        for name, condition in self.boundary.items():
            if name not in BOUNDARY_NAMES:
                msg = f"{path}.boundary.{name}: unknown boundary side"
                raise ConfigurationError(msg)
            if condition.kind is BoundaryKind.DIRICHLET and self.kind is ModelKind.TWO_PHASE:
                msg = f"{path}.boundary.{name}: the two_phase model supports no-flow boundaries only"
                raise ConfigurationError(msg)

        if self.forcing is None and (self.initial.manufactured or any(c.exact for c in self.boundary.values())):
            msg = f"{path}.forcing: manufactured initial or boundary data need a manufactured forcing"
            raise ConfigurationError(msg)
        if self.forcing is not None and self.kind is not ModelKind.LINEAR_PARABOLIC:
            msg = f"{path}.forcing: manufactured forcing applies to the linear_parabolic model only"
            raise ConfigurationError(msg)

        if self.kind is ModelKind.TWO_PHASE and not 0 <= self.initial.saturation <= 1:
            msg = f"{path}.initial.saturation: must lie in [0, 1]"
            raise ConfigurationError(msg)

        self._validate_wells(path)

    def _validate_wells(self, path: str) -> None:
        injectors = set()
        producers = set()
        for position, well in enumerate(self.wells):
            where = f"{path}.wells[{position}]"
            if well.rate < 0:
                msg = f"{where}.rate: must be >= 0"
                raise ConfigurationError(msg)
            if well.well_index is not None and well.well_index < 0:
                msg = f"{where}.well_index: must be >= 0"
                raise ConfigurationError(msg)
            if well.wellbore_radius <= 0:
                msg = f"{where}.wellbore_radius: must be > 0"
                raise ConfigurationError(msg)
            location = (well.subdomain, well.index)
            (injectors if well.kind is WellKind.INJECTOR else producers).add(location)
        shared = injectors & producers
        if shared:
            msg = f"{path}.wells: producer and injector share cells {sorted(shared)}"
            raise ConfigurationError(msg)


def density(p: ArrayLike, fluid: FluidProps) -> FloatArray:
    """Slightly compressible density rho_ref * exp(c_f (p - p_ref))."""
    return np.asarray(
        fluid.reference_density * np.exp(fluid.compressibility * (np.asarray(p) - fluid.reference_pressure)),
        dtype=np.float64,
    )


def density_derivative(p: ArrayLike, fluid: FluidProps) -> FloatArray:
    """d(rho)/dp."""
    return fluid.compressibility * density(p, fluid)


def _effective_saturation(s_w: ArrayLike, params: RelPermParams) -> tuple[FloatArray, FloatArray]:
    span = 1.0 - params.s_or - params.s_wirr
    s = np.asarray(s_w, dtype=np.float64)
    effective = np.clip((s - params.s_wirr) / span, 0.0, 1.0)
    inside = (s > params.s_wirr) & (s < 1.0 - params.s_or)
    return effective, inside


def brooks_corey(s_w: ArrayLike, params: RelPermParams) -> tuple[FloatArray, FloatArray]:
    """Water and oil relative permeabilities; saturations are clamped to the mobile range.

    Args:
        s_w: Water saturation.
        params: Curve parameters.

    Returns:
        ``(k_rw, k_ro)``.
    """
    effective, _ = _effective_saturation(s_w, params)
    return params.krw0 * effective**params.n_w, params.kro0 * (1.0 - effective) ** params.n_o


def brooks_corey_derivatives(s_w: ArrayLike, params: RelPermParams) -> tuple[FloatArray, FloatArray]:
    """Derivatives of ``brooks_corey`` with respect to s_w (zero where clamped)."""
    effective, inside = _effective_saturation(s_w, params)
    span = 1.0 - params.s_or - params.s_wirr
    d_krw = params.krw0 * params.n_w * effective ** (params.n_w - 1.0) / span
    d_kro = -params.kro0 * params.n_o * (1.0 - effective) ** (params.n_o - 1.0) / span
    return np.where(inside, d_krw, 0.0), np.where(inside, d_kro, 0.0)


def _pc_clamped(s_w: ArrayLike, params: CapillaryParams, s_wirr: float) -> tuple[FloatArray, FloatArray]:
    s = np.asarray(s_w, dtype=np.float64)
    lower = s_wirr + params.delta
    clamped = np.clip(s, lower, 1.0)
    inside = (s > lower) & (s < 1.0)
    return clamped, inside


def van_genuchten_pc(s_w: ArrayLike, params: CapillaryParams, s_wirr: float = 0.2) -> FloatArray:
    """Capillary pressure a[(s_w - s_wirr)^(-1/b) - 1]^(1/c), finite for every s_w.

    Saturations below s_wirr + delta are clamped, capping the pressure.
    """
    clamped, _ = _pc_clamped(s_w, params, s_wirr)
    bracket = np.maximum((clamped - s_wirr) ** (-1.0 / params.b) - 1.0, 0.0)
    return np.asarray(params.a * bracket ** (1.0 / params.c), dtype=np.float64)


def van_genuchten_pc_derivative(s_w: ArrayLike, params: CapillaryParams, s_wirr: float = 0.2) -> FloatArray:
    """d(p_c)/d(s_w) of the clamped curve."""
    clamped, inside = _pc_clamped(s_w, params, s_wirr)
    reduced = clamped - s_wirr
    power = reduced ** (-1.0 / params.b)
    bracket = power - 1.0
    positive = bracket > 0
    safe = np.where(positive, bracket, 1.0)
    d_power = (-1.0 / params.b) * reduced ** (-1.0 / params.b - 1.0)
    derivative = params.a / params.c * safe ** (1.0 / params.c - 1.0) * d_power
    return np.where(inside & positive, derivative, 0.0)


def van_genuchten_saturation(p_c: ArrayLike, params: CapillaryParams, s_wirr: float = 0.2) -> FloatArray:
    """Water saturation at which the clamped curve takes the capillary pressure ``p_c``.

    Pressures at or above the cap map to s_wirr + delta; pressures at or below
    p_c(1) map to 1.
    """
    pressure = np.maximum(np.asarray(p_c, dtype=np.float64), 0.0)
    s = s_wirr + (1.0 + (pressure / params.a) ** params.c) ** (-params.b)
    return np.asarray(np.clip(s, s_wirr + params.delta, 1.0), dtype=np.float64)


def upwind_concentration(flux: ArrayLike, c_up: ArrayLike, c_down: ArrayLike) -> FloatArray:
    """``c_up`` where the flux is positive, otherwise ``c_down``."""
    return np.asarray(np.where(np.asarray(flux) > 0, c_up, c_down), dtype=np.float64)


def upwind_mobility(
    aux_flux: ArrayLike,
    rho_left: ArrayLike,
    rho_right: ArrayLike,
    kr_left: ArrayLike,
    kr_right: ArrayLike,
    viscosity: float,
) -> FloatArray:
    """Upwind mobility (rho_l + rho_r)/(2 mu) * k_r(upwind side).

    The low side is upwind when the auxiliary flux is positive.
    """
    kr_up = np.where(np.asarray(aux_flux) > 0, kr_left, kr_right)
    return np.asarray((np.asarray(rho_left) + np.asarray(rho_right)) / (2.0 * viscosity) * kr_up, dtype=np.float64)


def manufactured_solution(x: ArrayLike, y: ArrayLike, t: ArrayLike, c1: float = 1.0) -> tuple[FloatArray, FloatArray]:
    """Exact pressure e^(c1 t) sin(2 pi x) sin(2 pi y) and its forcing."""
    shape = np.exp(c1 * np.asarray(t)) * np.sin(2.0 * np.pi * np.asarray(x)) * np.sin(2.0 * np.pi * np.asarray(y))
    pressure = np.asarray(shape, dtype=np.float64)
    forcing = np.asarray((c1 + 8.0 * np.pi**2) * shape, dtype=np.float64)
    return pressure, forcing


def peaceman_well_index(
    well: WellSpec, permeability: FloatArray, cell_size: FloatArray, thickness: float, units: UnitSystem
) -> float:
    """Well index of a cell, explicit or Peaceman-type with r_e = 0.2 h.

    Raises:
        ConfigurationError: If the wellbore radius is not below r_e.
    """
    if well.well_index is not None:
        return well.well_index
    k = float(np.prod(permeability)) ** (1.0 / len(permeability))
    h = float(np.prod(cell_size)) ** (1.0 / len(cell_size))
    equivalent_radius = 0.2 * h
    if well.wellbore_radius >= equivalent_radius:
        msg = (
            f"well {well.name}: wellbore radius {well.wellbore_radius:g} must be below the equivalent "
            f"radius {equivalent_radius:g}"
        )
        raise ConfigurationError(msg)
    return 2.0 * math.pi * units.darcy_factor * k * thickness / math.log(equivalent_radius / well.wellbore_radius)


@dataclass(frozen=True)
class WellTerm:
    """Net rate into a cell per equation and its derivatives by cell unknown."""

    rates: tuple[float, ...]
    jacobian: tuple[tuple[float, ...], ...]


def _injector_mass_rate(well: WellSpec, problem: ModelProblem) -> float:
    volume_rate = well.rate * problem.units.rate_factor
    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        return volume_rate
    return volume_rate * problem.water.reference_density


def well_contribution(
    well: WellSpec, problem: ModelProblem, values: tuple[float, ...], well_index: float
) -> WellTerm:
    """Source terms of one well in one cell.

    Args:
        well: The well.
        problem: Model providing fluids and curves.
        values: The cell unknowns, ordered as ``problem.fields``.
        well_index: WI of the completion.

    Returns:
        Rates in mass (or volume for the linear model) per unit time; negative
        for production.
    """
    kind = problem.kind
    if well.kind is WellKind.INJECTOR:
        q = _injector_mass_rate(well, problem)
        if kind is ModelKind.LINEAR_PARABOLIC:
            return WellTerm(rates=(q,), jacobian=((0.0,),))
        if kind is ModelKind.SINGLE_PHASE_TRACER:
            return WellTerm(rates=(q, q * well.concentration), jacobian=((0.0, 0.0), (0.0, 0.0)))
        return WellTerm(rates=(q, q), jacobian=((0.0, 0.0), (0.0, 0.0)))

    p = values[0]
    drawdown = p - well.bottom_hole_pressure
    if kind is ModelKind.LINEAR_PARABOLIC:
        mobility = 1.0 / problem.water.viscosity
        return WellTerm(rates=(-well_index * mobility * drawdown,), jacobian=((-well_index * mobility,),))

    if kind is ModelKind.SINGLE_PHASE_TRACER:
        mu = problem.water.viscosity
        rho = float(density(p, problem.water))
        d_rho = float(density_derivative(p, problem.water))
        q = -well_index * rho / mu * drawdown
        dq_dp = -well_index * (d_rho / mu * drawdown + rho / mu)
        c = values[1]
        return WellTerm(rates=(q, q * c), jacobian=((dq_dp, 0.0), (dq_dp * c, q)))

    s = values[1]
    oil = problem.oil_props
    water = problem.water
    relperm = problem.relperm
    krw, kro = (float(v) for v in brooks_corey(s, relperm))
    d_krw, d_kro = (float(v) for v in brooks_corey_derivatives(s, relperm))
    if problem.capillary is not None:
        pc = float(van_genuchten_pc(s, problem.capillary, relperm.s_wirr))
        d_pc = float(van_genuchten_pc_derivative(s, problem.capillary, relperm.s_wirr))
    else:
        pc, d_pc = 0.0, 0.0
    rho_o = float(density(p, oil))
    d_rho_o = float(density_derivative(p, oil))
    rho_w = float(density(p - pc, water))
    d_rho_w = float(density_derivative(p - pc, water))

    if krw == 0.0 and kro == 0.0:
        logger.warning("Producer %s sits in a cell with zero mobility", well.name)
    q_o = -well_index * rho_o * kro / oil.viscosity * drawdown
    q_w = -well_index * rho_w * krw / water.viscosity * drawdown
    dqo_dp = -well_index * kro / oil.viscosity * (d_rho_o * drawdown + rho_o)
    dqo_ds = -well_index * rho_o * d_kro / oil.viscosity * drawdown
    dqw_dp = -well_index * krw / water.viscosity * (d_rho_w * drawdown + rho_w)
    dqw_ds = -well_index * drawdown / water.viscosity * (-d_rho_w * d_pc * krw + rho_w * d_krw)
    return WellTerm(
        rates=(q_o + q_w, q_w),
        jacobian=((dqo_dp + dqw_dp, dqo_ds + dqw_ds), (dqw_dp, dqw_ds)),
    )


def initial_cell_values(problem: ModelProblem, cell_centres: FloatArray) -> FloatArray:
    """Initial unknowns for every spatial cell, shaped ``(n_cells, n_fields)``."""
    n_cells = cell_centres.shape[0]
    initial = problem.initial
    if initial.manufactured:
        c1 = problem.forcing.c1 if problem.forcing is not None else 1.0
        pressure, _ = manufactured_solution(cell_centres[:, 0], cell_centres[:, 1], 0.0, c1)
    else:
        pressure = np.full(n_cells, initial.pressure)
    if problem.kind is ModelKind.LINEAR_PARABOLIC:
        return pressure.reshape(n_cells, 1)
    second = initial.concentration if problem.kind is ModelKind.SINGLE_PHASE_TRACER else initial.saturation
    return np.column_stack([pressure, np.full(n_cells, second)])
