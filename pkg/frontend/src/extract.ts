/**
 * Directory-to-file extraction pipeline.
 *
 * Reads every .ppm/.pgm image in a directory in sorted filename order,
 * runs each through a named backbone, and writes the pooled vectors as a
 * memory-bank file plus, optionally, the full feature grids as a
 * spatial-map file. Filenames become the sample ids in both outputs.
 */

import { readdirSync } from 'node:fs'
import { join } from 'node:path'

import { Backbone, GRID_SIDE, INPUT_SIDE, initBackend } from './backbone'
import { DataError } from './errors'
import { writeBankFile, writeSpatialMapsFile } from './format'
import { readImageFile } from './ppm'

export interface ExtractOptions {
  imagesDir: string
  backbone: string
  bankPath: string
  mapsPath?: string
}

export interface ExtractSummary {
  count: number
  dim: number
  ids: string[]
}

export function listImages(dir: string): string[] {
  let entries: string[]
  try {
    entries = readdirSync(dir)
  } catch (err) {
    throw new DataError(`cannot list ${dir}: ${err}`)
  }
  const images = entries.filter((name) => /\.(ppm|pgm)$/i.test(name)).sort()
  if (images.length === 0) {
    throw new DataError(`no .ppm or .pgm images in ${dir}`)
  }
  return images
}

export async function extractDirectory(options: ExtractOptions): Promise<ExtractSummary> {
  const names = listImages(options.imagesDir)
  await initBackend()
  const backbone = new Backbone(options.backbone)
  try {
    const dim = backbone.depth
    const rows = new Float32Array(names.length * dim)
    const grids: Float32Array[] = []
    for (let i = 0; i < names.length; i++) {
      const image = readImageFile(join(options.imagesDir, names[i]))
      const result = backbone.extract(image)
      rows.set(result.pooled, i * dim)
      if (options.mapsPath) {
        grids.push(result.spatial)
      }
    }
    const metadata = { backbone: options.backbone, input_side: INPUT_SIDE }
    writeBankFile(options.bankPath, {
      rows,
      count: names.length,
      dim,
      ids: names,
      metadata,
    })
    if (options.mapsPath) {
      writeSpatialMapsFile(options.mapsPath, {
        grids,
        height: GRID_SIDE,
        width: GRID_SIDE,
        depth: dim,
        ids: names,
      })
    }
    return { count: names.length, dim, ids: names }
  } finally {
    backbone.dispose()
  }
}
