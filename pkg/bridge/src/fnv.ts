/**
 * 64-bit FNV-1a over token id streams.
 *
 * Mirrors the engine's fingerprinting byte for byte: every token id is
 * folded as eight little-endian bytes, so both processes derive the
 * same table keys and hash-fallback draws from the same context.  The
 * constants and the byte order are shared with the engine and must not
 * change on one side only.
 */

export const FNV64_OFFSET = 0xcbf29ce484222325n;
export const FNV64_PRIME = 0x100000001b3n;

const MASK64 = 0xffffffffffffffffn;
const LOW32 = 0xffffffffn;
const UNIT_SCALE = 4294967296; // 2**32

/** Fold one token id into a running fingerprint. */
export function fingerprintStep(fingerprint: bigint, tokenId: number): bigint {
  let h = fingerprint & MASK64;
  let rest = BigInt(tokenId);
  for (let i = 0; i < 8; i++) {
    h = ((h ^ (rest & 0xffn)) * FNV64_PRIME) & MASK64;
    rest >>= 8n;
  }
  return h;
}

/** Fingerprint a whole token sequence, optionally continuing from a seed. */
export function fingerprintTokens(
  tokenIds: Iterable<number>,
  seed: bigint = FNV64_OFFSET,
): bigint {
  let h = seed & MASK64;
  for (const id of tokenIds) {
    h = fingerprintStep(h, id);
  }
  return h;
}

/** Low 32 bits of a fingerprint mapped onto [0, 1). */
export function unitFromFingerprint(fingerprint: bigint): number {
  return Number(fingerprint & LOW32) / UNIT_SCALE;
}
