"""Deterministic synthetic driving world."""

from .autopilot import AutopilotConfig, OffRouteError, autopilot_action
from .render import CameraConfig, render_observation
from .route import ACTIVATION_RADIUS, RouteSpec, RouteTracker, plan_route, sample_routes
from .town import (
    BUILTIN_TOWNS,
    CLASS_NAMES,
    N_CLASSES,
    PlanningError,
    TownMap,
    TownSpec,
    build_town,
)
from .world import (
    CRUISE_SPEED,
    TEST_WEATHERS,
    TRAIN_WEATHERS,
    V_MAX,
    WEATHERS,
    WHEELBASE,
    CollisionReport,
    PlacementError,
    VehicleState,
    WeatherParams,
    WorldState,
    check_collision,
    get_weather,
    spawn_scenario,
    step,
)
