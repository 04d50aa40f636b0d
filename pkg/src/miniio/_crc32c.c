#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>
#include <string.h>

/* CRC32C (Castagnoli), reflected, polynomial 0x1EDC6F41,
 * init and final xor 0xFFFFFFFF.  Slice-by-8 software implementation. */

static uint32_t table[8][256];
static int table_ready = 0;

static void
build_tables(void)
{
    int i, k, s;
    for (i = 0; i < 256; i++) {
        uint32_t c = (uint32_t)i;
        for (k = 0; k < 8; k++)
            c = (c & 1) ? (0x82F63B78u ^ (c >> 1)) : (c >> 1);
        table[0][i] = c;
    }
    for (i = 0; i < 256; i++) {
        uint32_t c = table[0][i];
        for (s = 1; s < 8; s++) {
            c = table[0][c & 0xFF] ^ (c >> 8);
            table[s][i] = c;
        }
    }
    table_ready = 1;
}

static uint32_t
crc32c_update(uint32_t crc, const uint8_t *p, Py_ssize_t n)
{
    crc = ~crc;
    while (n && ((uintptr_t)p & 7)) {
        crc = table[0][(crc ^ *p++) & 0xFF] ^ (crc >> 8);
        n--;
    }
    while (n >= 8) {
        uint64_t w;
        memcpy(&w, p, 8);
        w ^= crc;
        crc = table[7][w & 0xFF] ^ table[6][(w >> 8) & 0xFF] ^
              table[5][(w >> 16) & 0xFF] ^ table[4][(w >> 24) & 0xFF] ^
              table[3][(w >> 32) & 0xFF] ^ table[2][(w >> 40) & 0xFF] ^
              table[1][(w >> 48) & 0xFF] ^ table[0][(w >> 56) & 0xFF];
        p += 8;
        n -= 8;
    }
    while (n--)
        crc = table[0][(crc ^ *p++) & 0xFF] ^ (crc >> 8);
    return ~crc;
}

static PyObject *
py_crc32c(PyObject *self, PyObject *args)
{
    Py_buffer buf;
    unsigned int start = 0;
    uint32_t r;

    if (!PyArg_ParseTuple(args, "y*|I", &buf, &start))
        return NULL;
    if (!table_ready)
        build_tables();
    Py_BEGIN_ALLOW_THREADS
    r = crc32c_update((uint32_t)start, (const uint8_t *)buf.buf, buf.len);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&buf);
    return PyLong_FromUnsignedLong((unsigned long)r);
}

static PyMethodDef methods[] = {
    {"crc32c", py_crc32c, METH_VARARGS,
     "crc32c(data, value=0) -> int\n\n"
     "CRC32C (Castagnoli) checksum of data, continuing from value."},
    {NULL, NULL, 0, NULL}
};

static struct PyModuleDef module = {
    PyModuleDef_HEAD_INIT, "_crc32c", NULL, -1, methods
};

PyMODINIT_FUNC
PyInit__crc32c(void)
{
    build_tables();
    return PyModule_Create(&module);
}
