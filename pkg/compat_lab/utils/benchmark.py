""" Useful functions for timing numerical code. """

import time

import torch
import torch.utils.benchmark as benchmark


def benchmark_fn(fn, *inputs, repeats=10, desc='', verbose=True, **kwinputs):
    """ Use Pytorch Benchmark on an arbitrary function. """
    if verbose:
        print(desc, '- Timing')
    t = benchmark.Timer(
            stmt='fn(*inputs, **kwinputs)',
            globals={'fn': fn, 'inputs': inputs, 'kwinputs': kwinputs},
            num_threads=torch.get_num_threads(),
            )
    m = t.timeit(repeats)
    if verbose:
        print(m)
    return t, m


def benchmark_compare(fns, *inputs, repeats=10, verbose=True, **kwinputs):
    """ Time several implementations of the same computation. fns: dict name -> callable. """
    return {name: benchmark_fn(fn, *inputs, repeats=repeats, desc=name, verbose=verbose,
                               **kwinputs)[1]
            for name, fn in fns.items()}


class Stopwatch:
    """Wall-clock timer for a single run, used to report check runtimes."""

    def __enter__(self):
        self.start = time.perf_counter()
        self.elapsed = None
        return self

    def __exit__(self, et, ev, tb):
        self.elapsed = time.perf_counter() - self.start
        # implicit return of None => don't swallow exceptions
