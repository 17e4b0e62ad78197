# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled evaluation core.

Walks a frozen plan (opcode/parent tables plus preallocated 2-D float64
buffers) entirely in C: elementwise maps and reductions are fixed-order
loops, matrix products go through BLAS dgemm. Semantics mirror the numpy
fallback in ``plan.run_numpy``.
"""

from libc.math cimport exp as cexp, log as clog, pow as cpow, sqrt as csqrt
from libc.math cimport tanh as ctanh
from libc.stdlib cimport free, malloc
from libc.string cimport memcpy, memset

from scipy.linalg.cython_blas cimport dgemm

import numpy as np

cimport numpy as cnp

cnp.import_array()

# Must match metaboot.engine.opcodes.Op; checked at package import.
OP_NAMES = (
    "LEAF", "CONST", "ADD", "ADD_BIAS", "SUB", "MUL", "MUL_SCALAR", "MATMUL",
    "RELU", "TANH", "EXP", "LOG", "SUM", "MEAN", "SOFTMAX", "LOG_SOFTMAX",
    "L2NORM_ROWS", "SCALE", "CONCAT_ROWS", "INDEX_SELECT", "TRANSPOSE",
    "ROWSUM", "COLMUL", "POW_CONST", "GT_ZERO_MASK", "INDEX_SCATTER",
    "RESHAPE",
)

cdef double L2EPS = 1e-30

cdef enum:
    OP_LEAF = 0
    OP_CONST = 1
    OP_ADD = 2
    OP_ADD_BIAS = 3
    OP_SUB = 4
    OP_MUL = 5
    OP_MUL_SCALAR = 6
    OP_MATMUL = 7
    OP_RELU = 8
    OP_TANH = 9
    OP_EXP = 10
    OP_LOG = 11
    OP_SUM = 12
    OP_MEAN = 13
    OP_SOFTMAX = 14
    OP_LOG_SOFTMAX = 15
    OP_L2NORM_ROWS = 16
    OP_SCALE = 17
    OP_CONCAT_ROWS = 18
    OP_INDEX_SELECT = 19
    OP_TRANSPOSE = 20
    OP_ROWSUM = 21
    OP_COLMUL = 22
    OP_POW_CONST = 23
    OP_GT_ZERO_MASK = 24
    OP_INDEX_SCATTER = 25
    OP_RESHAPE = 26


cdef void mm(double* A, double* B, double* O, int m, int k, int n) noexcept nogil:
    # Row-major C = A @ B via column-major BLAS: compute C^T = B^T A^T.
    cdef char tn = 78  # 'N'
    cdef double one = 1.0, zero = 0.0
    dgemm(&tn, &tn, &n, &m, &k, &one, B, &n, A, &k, &zero, O, &n)


cdef class CRunner:
    cdef cnp.int32_t[::1] ops
    cdef cnp.int32_t[::1] pa
    cdef cnp.int32_t[::1] pb
    cdef cnp.float64_t[::1] scalars
    cdef list buffers          # keeps ndarray refs alive
    cdef list aux
    cdef double** ptr
    cdef long long** auxptr
    cdef int* rows
    cdef int* cols
    cdef int* auxlen
    cdef int n

    def __cinit__(self, ops, pa, pb, scalars, aux, buffers):
        self.ops = ops
        self.pa = pa
        self.pb = pb
        self.scalars = scalars
        self.buffers = buffers
        self.aux = aux
        self.n = len(buffers)
        self.ptr = <double**> malloc(self.n * sizeof(double*))
        self.auxptr = <long long**> malloc(self.n * sizeof(long long*))
        self.rows = <int*> malloc(self.n * sizeof(int))
        self.cols = <int*> malloc(self.n * sizeof(int))
        self.auxlen = <int*> malloc(self.n * sizeof(int))
        if (self.ptr == NULL or self.auxptr == NULL or self.rows == NULL
                or self.cols == NULL or self.auxlen == NULL):
            raise MemoryError
        cdef int i
        cdef cnp.ndarray arr
        cdef cnp.ndarray idx
        for i in range(self.n):
            arr = buffers[i]
            if (cnp.PyArray_TYPE(arr) != cnp.NPY_FLOAT64 or arr.ndim != 2
                    or not cnp.PyArray_IS_C_CONTIGUOUS(arr)):
                raise ValueError(f"buffer {i}: need C-contiguous 2-D float64")
            self.ptr[i] = <double*> cnp.PyArray_DATA(arr)
            self.rows[i] = <int> arr.shape[0]
            self.cols[i] = <int> arr.shape[1]
            if aux[i] is not None:
                idx = aux[i]
                if cnp.PyArray_TYPE(idx) != cnp.NPY_INT64 or not cnp.PyArray_IS_C_CONTIGUOUS(idx):
                    raise ValueError(f"aux {i}: need contiguous int64")
                self.auxptr[i] = <long long*> cnp.PyArray_DATA(idx)
                self.auxlen[i] = <int> idx.shape[0]
            else:
                self.auxptr[i] = NULL
                self.auxlen[i] = 0

    def __dealloc__(self):
        free(self.ptr)
        free(self.auxptr)
        free(self.rows)
        free(self.cols)
        free(self.auxlen)

    def run(self, int start, int end):
        if start < 0 or end > self.n or start > end:
            raise ValueError("run range out of bounds")
        with nogil:
            self._run(start, end)

    cdef void _run(self, int start, int end) noexcept nogil:
        cdef int i, op, a, b, m, n, k, r, c, t, size
        cdef double s, acc, mx, inv
        cdef double* A
        cdef double* B
        cdef double* O
        cdef long long* IDX
        for i in range(start, end):
            op = self.ops[i]
            if op == OP_LEAF or op == OP_CONST:
                continue
            O = self.ptr[i]
            m = self.rows[i]
            n = self.cols[i]
            size = m * n
            a = self.pa[i]
            b = self.pb[i]
            A = self.ptr[a]
            if op == OP_ADD:
                B = self.ptr[b]
                for t in range(size):
                    O[t] = A[t] + B[t]
            elif op == OP_ADD_BIAS:
                B = self.ptr[b]
                for r in range(m):
                    for c in range(n):
                        O[r * n + c] = A[r * n + c] + B[c]
            elif op == OP_SUB:
                B = self.ptr[b]
                for t in range(size):
                    O[t] = A[t] - B[t]
            elif op == OP_MUL:
                B = self.ptr[b]
                for t in range(size):
                    O[t] = A[t] * B[t]
            elif op == OP_MUL_SCALAR:
                B = self.ptr[b]
                s = A[0]
                for t in range(size):
                    O[t] = s * B[t]
            elif op == OP_MATMUL:
                B = self.ptr[b]
                mm(A, B, O, m, self.cols[a], n)
            elif op == OP_RELU:
                for t in range(size):
                    O[t] = A[t] if A[t] > 0.0 else 0.0
            elif op == OP_TANH:
                for t in range(size):
                    O[t] = ctanh(A[t])
            elif op == OP_EXP:
                for t in range(size):
                    O[t] = cexp(A[t])
            elif op == OP_LOG:
                for t in range(size):
                    O[t] = clog(A[t])
            elif op == OP_SUM or op == OP_MEAN:
                acc = 0.0
                k = self.rows[a] * self.cols[a]
                for t in range(k):
                    acc += A[t]
                O[0] = acc if op == OP_SUM else acc / k
            elif op == OP_SOFTMAX:
                for r in range(m):
                    mx = A[r * n]
                    for c in range(1, n):
                        if A[r * n + c] > mx:
                            mx = A[r * n + c]
                    acc = 0.0
                    for c in range(n):
                        s = cexp(A[r * n + c] - mx)
                        O[r * n + c] = s
                        acc += s
                    inv = 1.0 / acc
                    for c in range(n):
                        O[r * n + c] *= inv
            elif op == OP_LOG_SOFTMAX:
                for r in range(m):
                    mx = A[r * n]
                    for c in range(1, n):
                        if A[r * n + c] > mx:
                            mx = A[r * n + c]
                    acc = 0.0
                    for c in range(n):
                        acc += cexp(A[r * n + c] - mx)
                    s = mx + clog(acc)
                    for c in range(n):
                        O[r * n + c] = A[r * n + c] - s
            elif op == OP_L2NORM_ROWS:
                for r in range(m):
                    acc = 0.0
                    for c in range(n):
                        acc += A[r * n + c] * A[r * n + c]
                    inv = 1.0 / csqrt(acc + L2EPS)
                    for c in range(n):
                        O[r * n + c] = A[r * n + c] * inv
            elif op == OP_SCALE:
                s = self.scalars[i]
                for t in range(size):
                    O[t] = s * A[t]
            elif op == OP_CONCAT_ROWS:
                IDX = self.auxptr[i]
                r = 0
                for t in range(self.auxlen[i]):
                    k = <int> IDX[t]
                    memcpy(O + r * n, self.ptr[k], self.rows[k] * n * sizeof(double))
                    r += self.rows[k]
            elif op == OP_INDEX_SELECT:
                IDX = self.auxptr[i]
                for r in range(m):
                    memcpy(O + r * n, A + IDX[r] * n, n * sizeof(double))
            elif op == OP_TRANSPOSE:
                k = self.cols[a]
                for r in range(self.rows[a]):
                    for c in range(k):
                        O[c * n + r] = A[r * k + c]
            elif op == OP_ROWSUM:
                k = self.cols[a]
                for r in range(m):
                    acc = 0.0
                    for c in range(k):
                        acc += A[r * k + c]
                    O[r] = acc
            elif op == OP_COLMUL:
                B = self.ptr[b]
                for r in range(m):
                    s = B[r]
                    for c in range(n):
                        O[r * n + c] = A[r * n + c] * s
            elif op == OP_POW_CONST:
                s = self.scalars[i]
                for t in range(size):
                    O[t] = cpow(A[t], s)
            elif op == OP_GT_ZERO_MASK:
                for t in range(size):
                    O[t] = 1.0 if A[t] > 0.0 else 0.0
            elif op == OP_INDEX_SCATTER:
                IDX = self.auxptr[i]
                memset(O, 0, size * sizeof(double))
                k = self.rows[a]
                for r in range(k):
                    for c in range(n):
                        O[IDX[r] * n + c] += A[r * n + c]
            elif op == OP_RESHAPE:
                memcpy(O, A, size * sizeof(double))
