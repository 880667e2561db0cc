"""The position-target message passed from planners/services to the vehicle."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace


class Mobility(enum.Enum):
    AERIAL = "Aerial"
    GROUND = "Ground"


class AxisMode(enum.Enum):
    POSITION = "Position"
    VELOCITY = "Velocity"


class XyFrame(enum.Enum):
    ODOMETRY = "Odometry"
    BODY = "Body"


class ZFrame(enum.Enum):
    ODOMETRY = "Odometry"
    BODY = "Body"
    GROUND = "Ground"
    CEILING = "Ceiling"


class YawMode(enum.Enum):
    ANGLE = "Angle"
    RATE = "Rate"


class UnsupportedTargetError(ValueError):
    pass


@dataclass(frozen=True)
class PositionTarget:
    """Desired pose or velocity with per-axis interpretation tags.

    Position fields are read when the axis is in position mode and the
    velocity fields otherwise.  ``yaw_mode`` picks between ``yaw`` and
    ``yaw_rate``.
    """

    mobility: Mobility = Mobility.GROUND
    xy_mode: AxisMode = AxisMode.POSITION
    z_mode: AxisMode = AxisMode.POSITION
    xy_frame: XyFrame = XyFrame.ODOMETRY
    z_frame: ZFrame = ZFrame.ODOMETRY
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    yaw: float = 0.0
    yaw_rate: float = 0.0
    yaw_mode: YawMode = YawMode.ANGLE

    def with_(self, **kw) -> "PositionTarget":
        return replace(self, **kw)

    def xy_supported(self) -> bool:
        return not (self.xy_frame is XyFrame.BODY and self.xy_mode is AxisMode.POSITION)

    def z_supported(self) -> bool:
        return not (self.z_frame is ZFrame.BODY and self.z_mode is AxisMode.POSITION)

    def sim_supported(self) -> bool:
        """True when the simulator can execute this target directly.

        Ground mobility ignores the z tags because the wheels pin the height.
        """
        if not self.xy_supported():
            return False
        return self.mobility is Mobility.GROUND or self.z_supported()

    def check_sim_supported(self) -> "PositionTarget":
        if not self.sim_supported():
            raise UnsupportedTargetError(
                f"unsupported target combination xy={self.xy_frame.value}/{self.xy_mode.value} "
                f"z={self.z_frame.value}/{self.z_mode.value}")
        return self


def is_valid_combination(t: PositionTarget) -> bool:
    """Every axis carries exactly one known (mode, frame) interpretation."""
    return (isinstance(t.mobility, Mobility) and isinstance(t.xy_mode, AxisMode)
            and isinstance(t.z_mode, AxisMode) and isinstance(t.xy_frame, XyFrame)
            and isinstance(t.z_frame, ZFrame) and isinstance(t.yaw_mode, YawMode))
