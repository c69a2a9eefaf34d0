"""Exception hierarchy. Every error raised on purpose derives from PcfError."""


class PcfError(Exception):
    pass


class InvalidFractal(PcfError):
    pass


class AddressCollision(PcfError):
    pass


class NotRenormalizable(PcfError):
    pass


class LevelMismatch(PcfError):
    pass


class NotOnCellBoundary(PcfError):
    pass


class SingularSystem(PcfError):
    pass


class SolverFailure(PcfError):
    pass


class NoSchedule(PcfError):
    pass


class ScheduleViolation(PcfError):
    pass


class FitDiverged(PcfError):
    pass


class CellsIntersect(PcfError):
    pass


class ZeroMass(PcfError):
    pass


class NearSingularM(PcfError):
    pass


class LeftCandidateSpace(PcfError):
    pass


class NoConvergence(PcfError):
    pass


class NormalizationZero(PcfError):
    pass


class IllConditionedA(PcfError):
    pass


class ResolutionExceeded(PcfError):
    pass


class TailNotSummable(PcfError):
    pass


class NotACover(PcfError):
    pass


class CoverGap(PcfError):
    pass


class NoAdmissibleCells(PcfError):
    pass


class CertificateTooWeak(PcfError):
    pass
