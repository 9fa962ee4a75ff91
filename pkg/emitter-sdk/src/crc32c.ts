/** CRC-32C (Castagnoli), reflected table form; the spool frame trailer. */

const POLY = 0x82f63b78;

const TABLE = (() => {
  const table = new Uint32Array(256);
  for (let i = 0; i < 256; i++) {
    let crc = i;
    for (let k = 0; k < 8; k++) {
      crc = crc & 1 ? (crc >>> 1) ^ POLY : crc >>> 1;
    }
    table[i] = crc >>> 0;
  }
  return table;
})();

export function crc32c(data: Buffer, value = 0): number {
  let crc = (value ^ 0xffffffff) >>> 0;
  for (let i = 0; i < data.length; i++) {
    crc = ((crc >>> 8) ^ TABLE[(crc ^ data[i]) & 0xff]) >>> 0;
  }
  return (crc ^ 0xffffffff) >>> 0;
}
