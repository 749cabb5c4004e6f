"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can distinguish input
problems, topology problems and numerical failures without string matching.
"""

EXIT_INPUT = 2
EXIT_TOPOLOGY = 3
EXIT_NUMERICAL = 4


class StreamVecchiaError(Exception):
    exit_code = 1


class InputError(StreamVecchiaError):
    exit_code = EXIT_INPUT


class MalformedGeometryError(InputError):
    pass


class ValidationError(InputError):
    pass


class ConfigurationError(InputError):
    pass


class UnsnappableSiteError(InputError):
    def __init__(self, site_ids, threshold):
        self.site_ids = list(site_ids)
        self.threshold = threshold
        shown = ", ".join(str(s) for s in self.site_ids[:20])
        more = "" if len(self.site_ids) <= 20 else f" (+{len(self.site_ids) - 20} more)"
        super().__init__(f"sites farther than {threshold} from any reach: {shown}{more}")


class ImputationError(InputError):
    pass


class DimensionError(InputError):
    pass


class ConsistencyError(InputError):
    pass


class TopologyError(StreamVecchiaError):
    exit_code = EXIT_TOPOLOGY

    def __init__(self, message, reach_ids=()):
        self.reach_ids = list(reach_ids)
        super().__init__(message)


class NumericalError(StreamVecchiaError):
    exit_code = EXIT_NUMERICAL


class FactorizationError(NumericalError):
    def __init__(self, message, site_id=None):
        self.site_id = site_id
        super().__init__(message)


class SingularDesignError(NumericalError):
    pass


class SimulationError(NumericalError):
    pass
